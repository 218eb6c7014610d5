import json

import pytest
import torch
from tokenizers import Tokenizer
from tokenizers.models import WordLevel
from tokenizers.pre_tokenizers import Whitespace
from transformers import GPT2Config, GPT2Model, PreTrainedTokenizerFast

WORDS = [
    "adult", "patients", "with", "histologically", "confirmed", "stage",
    "iii", "iv", "disease", "no", "prior", "systemic", "therapy", "ecog",
    "performance", "status", "of", "or", "less", "adequate", "organ",
    "function", "measurable", "lesion", "excluded", "pregnancy", "active",
    "infection", "treated", "brain", "metastases", "informed", "consent",
]

SAMPLE_CRITERIA = [
    "adult patients with histologically confirmed stage iii disease",
    "no prior systemic therapy ecog performance status of or less",
    "adequate organ function measurable lesion informed consent",
    "excluded pregnancy active infection treated brain metastases",
    "adult patients no prior therapy adequate organ function",
]


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """A 24-block causal LM with a word-level tokenizer, saved locally, so
    the capture points 6/12/18 are interior and the final layer is distinct."""
    d = tmp_path_factory.mktemp("tiny-lm")
    vocab = {"[UNK]": 0, "[PAD]": 1}
    for i, w in enumerate(WORDS, start=2):
        vocab[w] = i
    tok = Tokenizer(WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = Whitespace()
    fast = PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="[UNK]",
                                   pad_token="[PAD]")
    fast.save_pretrained(d)
    cfg = GPT2Config(n_layer=24, n_embd=32, n_head=4, vocab_size=len(vocab),
                     n_positions=600, bos_token_id=None, eos_token_id=None)
    torch.manual_seed(202)
    GPT2Model(cfg).save_pretrained(d)
    return str(d)


@pytest.fixture
def trials_file(tmp_path):
    path = tmp_path / "trials.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for i, text in enumerate(SAMPLE_CRITERIA):
            fh.write(json.dumps({
                "nct_id": f"NCT{i:04d}",
                "phase": "II",
                "smiles": ["CCO"],
                "icd_codes": ["A00"],
                "criteria_text": text,
                "start_date": "2015-01-01",
            }) + "\n")
    return str(path)
