"""Data pipeline: tokenizer, corpus stats, scrubbing, chat templating, packing."""
