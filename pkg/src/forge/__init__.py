"""Desk-scale decoder-only LM training pipeline.

Small, fully inspectable implementations of the pieces a modern LM
training run is built from: an autodiff tensor core, a GQA/RoPE
transformer, depth up-scaling and checkpoint merging, a data pipeline
(tokenizer, scrubbing, chat templating, sample packing), SFT/DPO/GRPO
objectives, verifiable-reward checkers, and an evaluation harness, all
wired together by the ``forge`` command line tool.
"""

__version__ = "0.1.0"
