import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from types import SimpleNamespace

import pytest

from kloc import model as M
from kloc import trainer as TR
from kloc import world as W


@pytest.fixture(scope="session")
def tiny_lab():
    """A small world and a 4-layer model trained on it (a few seconds)."""
    world = W.generate_world(3, n_entities=12, n_relations=3, n_facts=24, pool_size=4)
    tok = W.Tokenizer.for_world(world)
    split = W.split_probe_sets(world)
    cfg = M.ModelConfig(n_layers=4, d_model=32, n_heads=2, d_ff=64, vocab_size=tok.vocab_size, max_len=16)
    prompts = W.prompts_for(world, tok, split, "entity") + W.prompts_for(world, tok, split, "relation")
    params, report = TR.train(M.init_params(cfg, 0), cfg, prompts,
                              TR.TrainConfig(epochs=80, batch_size=16, lr=3e-3), tok.content_ids())
    return SimpleNamespace(world=world, tok=tok, split=split, cfg=cfg, params=params, report=report,
                           prompts=prompts)
