"""Block-punched pruning, packed sparse inference and two-lane branch scheduling."""
