"""Training: schedules, optimizer, objectives, and the three loop drivers."""
