"""regional-adv tests package."""
