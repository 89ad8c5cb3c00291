"""Tibetan language-model toolkit: corpus preparation, unigram subword
tokenization, BERT-style pretraining data and encoder, and downstream
classification / question-generation evaluation."""

__version__ = "0.1.0"
SCHEMA_VERSION = 1
