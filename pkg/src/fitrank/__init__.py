"""FIT pre-ranking model."""
