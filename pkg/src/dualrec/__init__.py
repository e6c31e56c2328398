"""Creator-side recommendation: mirrored retrieval and ranking, user
availability calculation, combined serving, and a synthetic A/B harness."""

__version__ = "0.1.0"
