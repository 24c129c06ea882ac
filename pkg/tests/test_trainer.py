import numpy as np
import pytest

from kloc import model as M
from kloc import trainer as TR
from kloc import world as W


@pytest.fixture(scope="module")
def small():
    world = W.generate_world(5, n_entities=10, n_relations=2, n_facts=12, pool_size=4)
    tok = W.Tokenizer.for_world(world)
    split = W.split_probe_sets(world)
    cfg = M.ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=tok.vocab_size, max_len=16)
    prompts = W.prompts_for(world, tok, split, "entity") + W.prompts_for(world, tok, split, "relation")
    return world, tok, split, cfg, prompts


def test_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TR.TrainConfig(recall_target=1.5)
    with pytest.raises(ValueError):
        TR.TrainConfig(optimizer="lbfgs")


def test_untrained_recall_is_near_chance(small):
    world, tok, _, cfg, prompts = small
    rep = TR.evaluate_recall(M.init_params(cfg, 0), cfg, prompts)
    pool = min(len(p) for p in world.pools.values())
    assert rep.min_accuracy() <= 2.0 / pool


def test_training_is_deterministic(small):
    _, tok, _, cfg, prompts = small
    conf = TR.TrainConfig(epochs=2, batch_size=8, seed=4)
    a, ra = TR.train(M.init_params(cfg, 0), cfg, prompts, conf, tok.content_ids())
    b, rb = TR.train(M.init_params(cfg, 0), cfg, prompts, conf, tok.content_ids())
    assert M.checkpoint_bytes(cfg, a) == M.checkpoint_bytes(cfg, b)
    assert ra.loss_curve == rb.loss_curve
    c, _ = TR.train(M.init_params(cfg, 0), cfg, prompts, TR.TrainConfig(epochs=2, batch_size=8, seed=5),
                    tok.content_ids())
    assert M.checkpoint_bytes(cfg, a) != M.checkpoint_bytes(cfg, c)


def test_zero_epochs_returns_copy(small):
    _, _, _, cfg, prompts = small
    p0 = M.init_params(cfg, 0)
    p1, rep = TR.train(p0, cfg, prompts, TR.TrainConfig(epochs=0))
    assert all(np.array_equal(p0[k], p1[k]) and p0[k] is not p1[k] for k in p0)
    assert rep.loss_curve == []


def test_vocabulary_mismatch(small):
    _, _, _, cfg, prompts = small
    narrow = M.ModelConfig(n_layers=1, d_model=8, n_heads=1, d_ff=8, vocab_size=5, max_len=16)
    with pytest.raises(M.VocabularyError):
        TR.train(M.init_params(narrow, 0), narrow, prompts, TR.TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_good(small):
    _, _, _, cfg, prompts = small
    p0 = M.init_params(cfg, 0)
    p0["unembed"] = p0["unembed"] * np.float32(1e38)
    with pytest.raises(TR.TrainingError) as info:
        TR.train(p0, cfg, prompts, TR.TrainConfig(epochs=1, optimizer="sgd", lr=1e30))
    assert info.value.last_good is not None and info.value.epoch == 0


def test_empty_prompt_list_is_undefined(small):
    _, _, _, cfg, _ = small
    rep = TR.evaluate_recall(M.init_params(cfg, 0), cfg, [])
    assert not rep.defined and rep.min_accuracy() is None
    assert rep.accuracy == {"entity": None, "relation": None}


def test_rigged_model_has_full_recall(small):
    _, tok, _, cfg, prompts = small
    target = prompts[0].answer
    same = [p for p in prompts if p.answer == target]
    params = M.init_params(cfg, 0)
    params["ln_f.g"] = np.zeros_like(params["ln_f.g"])
    params["ln_f.b"] = np.ones_like(params["ln_f.b"])
    params["unembed"] = np.zeros_like(params["unembed"])
    params["unembed"][:, target] = 1.0
    rep = TR.evaluate_recall(params, cfg, same)
    assert all(v in (None, 1.0) for v in rep.accuracy.values())


def test_tiny_lab_meets_recall_and_generalisation_gap(tiny_lab):
    rep = tiny_lab.report
    assert rep.meets(0.95)
    assert len(rep.loss_curve) == 80
    held = W.prompts_for(tiny_lab.world, tiny_lab.tok, tiny_lab.split, "entity", "held_out") + \
        W.prompts_for(tiny_lab.world, tiny_lab.tok, tiny_lab.split, "relation", "held_out")
    held_rep = TR.evaluate_recall(tiny_lab.params, tiny_lab.cfg, held)
    for persp in W.PERSPECTIVES:
        assert held_rep.accuracy[persp] <= rep.accuracy[persp]
