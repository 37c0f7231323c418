# stotrans/text/__init__.py

from stotrans.text.tokenizer import PAD_ID, UNK_ID, Vocab, build_vocab, tokenize
from stotrans.text.datasets import Batch, DataSplits, LabeledDataset, TextRows, carve_validation, load_tsv, split, write_tsv
from stotrans.text.synthetic import SyntheticConfig, majority_vote_oracle, split_synthetic, synthetic_id_ood

__all__ = [
    "PAD_ID", "UNK_ID", "Vocab", "build_vocab", "tokenize",
    "Batch", "DataSplits", "LabeledDataset", "TextRows", "carve_validation", "load_tsv", "split", "write_tsv",
    "SyntheticConfig", "majority_vote_oracle", "split_synthetic", "synthetic_id_ood",
]
