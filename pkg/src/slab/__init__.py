"""slab: a desk-scale workbench for adapting masked-language-model encoders
to specialised text domains (tokenizer training, SC/FP pre-training,
downstream fine-tuning, grid-search tuning, and evaluation benchmarks)."""

__version__ = "0.1.0"
