"""Internal primitives, not part of the public API."""
