"""HISR: hindsight-modulated segmental process rewards for multi-turn agents."""
