"""Planning under uncertainty about opponent goals on grid route-planning tasks."""
