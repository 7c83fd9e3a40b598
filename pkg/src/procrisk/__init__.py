"""Dynamic convex risk measures for cash-flow processes on finite event trees."""
