from pathlib import Path

import pytest

VOCAB_WORDS = [
    "alpha",
    "beta",
    "gamma",
    "delta",
    "river",
    "stone",
    "cloud",
    "ember",
    "plain",
    "ridge",
]


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory) -> str:
    """Build a tiny local sentence-encoder (16-dim BERT) for fast offline tests."""
    import torch
    from transformers import BertConfig, BertModel, BertTokenizerFast

    path: Path = tmp_path_factory.mktemp("tiny-encoder")
    torch.manual_seed(7)
    config = BertConfig(
        vocab_size=15,
        hidden_size=16,
        num_hidden_layers=1,
        num_attention_heads=2,
        intermediate_size=32,
        max_position_embeddings=64,
    )
    BertModel(config).save_pretrained(path)
    specials = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    vocab_file = path / "vocab.txt"
    vocab_file.write_text("\n".join(specials + VOCAB_WORDS) + "\n", encoding="utf-8")
    BertTokenizerFast(vocab_file=str(vocab_file)).save_pretrained(path)
    return str(path)
