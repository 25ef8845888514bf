import math

import numpy as np
import pytest
import torch

from conftest import random_outputs
from graphdistill.baselines import (
    MultitaskDecoders,
    StrategyConfig,
    build_predefined_graph,
    cross_modal_loss,
    kd_loss,
    multitask_recon_loss,
)
from graphdistill.datagen import ModalitySpec
from graphdistill.encoders import ModalityOutputs


def paired(logits_a, logits_b, rep_a=None, rep_b=None):
    rep_a = rep_a if rep_a is not None else [[1.0, 1.0]]
    rep_b = rep_b if rep_b is not None else [[1.0, 1.0]]
    make = lambda rep, logits: ModalityOutputs(
        representation=torch.tensor(rep, dtype=torch.float64),
        logits=torch.tensor(logits, dtype=torch.float64),
    )
    return [make(rep_a, logits_a), make(rep_b, logits_b)]


# -- kd ------------------------------------------------------------------------


def test_kd_identical_logits_self_entropy_and_zero_gradient():
    logits = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
    outs = [
        ModalityOutputs(torch.randn(4, 3, dtype=torch.float64), logits),
        ModalityOutputs(torch.randn(4, 3, dtype=torch.float64), logits.clone().detach()),
    ]
    losses = kd_loss(outs, temperature=2.0)
    probs = torch.softmax(logits.detach() / 2.0, dim=-1)
    self_entropy = -(probs * probs.log()).sum(dim=-1).mean()
    assert torch.allclose(losses[0], self_entropy, atol=1e-12)
    losses[0].backward()
    assert logits.grad.abs().max() < 1e-12


def test_kd_infinite_temperature_approaches_log_l():
    outs = random_outputs(2, batch=6, num_classes=7, seed=0)
    losses = kd_loss(outs, temperature=1e8)
    assert torch.allclose(losses, torch.full_like(losses, math.log(7)), atol=1e-6)


def test_kd_hand_computed_two_class_case():
    outs = paired([[1.0, 0.0]], [[0.0, 1.0]])
    t = 2.0
    # direct formula: soft targets from the sender, log-softmax of the receiver
    sender = [math.exp(0.0 / t), math.exp(1.0 / t)]
    z = sum(sender)
    sender = [v / z for v in sender]
    receiver = [math.exp(1.0 / t), math.exp(0.0 / t)]
    z = sum(receiver)
    receiver = [v / z for v in receiver]
    expected = -sum(s * math.log(r) for s, r in zip(sender, receiver))
    losses = kd_loss(outs, temperature=t)
    assert abs(losses[0].item() - expected) < 1e-12


def test_kd_validation():
    with pytest.raises(ValueError):
        kd_loss(random_outputs(1), temperature=2.0)
    with pytest.raises(ValueError):
        kd_loss(random_outputs(2), temperature=0.0)


def test_kd_pairwise_averaging_two_equals_single_pair():
    outs = random_outputs(2, batch=3, seed=1)
    losses = kd_loss(outs, temperature=2.0)
    # with two modalities each entry is the single incoming pair loss
    log_p0 = torch.log_softmax(outs[0].logits / 2.0, dim=-1)
    target1 = torch.softmax(outs[1].logits.detach() / 2.0, dim=-1)
    expected0 = -(target1 * log_p0).sum(dim=-1).mean()
    assert torch.allclose(losses[0], expected0, atol=1e-12)


# -- cross-modal -----------------------------------------------------------------


def test_cross_modal_identical_outputs_zero():
    base = random_outputs(1, batch=4, seed=2)[0]
    outs = [ModalityOutputs(base.representation.clone(), base.logits.clone())
            for _ in range(3)]
    assert cross_modal_loss(outs).abs().max() < 1e-12


def test_cross_modal_rep_term_is_squared_l2():
    v = torch.tensor([0.3, -0.7, 0.2], dtype=torch.float64)
    rep = torch.randn(1, 3, dtype=torch.float64)
    outs = [
        ModalityOutputs(rep + v, torch.ones(1, 4, dtype=torch.float64)),
        ModalityOutputs(rep, torch.ones(1, 4, dtype=torch.float64)),
    ]
    losses = cross_modal_loss(outs, temperature=2.0, weight_logits=1.0, weight_rep=1.0)
    assert torch.allclose(losses[0], (v ** 2).sum(), atol=1e-12)
    assert torch.allclose(losses[1], (v ** 2).sum(), atol=1e-12)


def test_cross_modal_matches_double_loop():
    outs = random_outputs(3, batch=4, seed=3)
    losses = cross_modal_loss(outs, temperature=2.0, weight_logits=1.3, weight_rep=0.7)
    probs = [torch.softmax(o.logits / 2.0, dim=-1) for o in outs]
    for k in range(3):
        terms = []
        for j in range(3):
            if j == k:
                continue
            rep = (outs[k].representation - outs[j].representation).pow(2).sum(-1)
            logit = (probs[k] - probs[j]).pow(2).sum(-1)
            terms.append((0.7 * rep + 1.3 * logit).mean())
        expected = sum(terms) / len(terms)
        assert torch.allclose(losses[k], expected, atol=1e-12)


def test_cross_modal_sender_detached():
    outs = random_outputs(2, batch=2, seed=4, requires_grad=True)
    cross_modal_loss(outs)[0].backward()
    assert outs[1].representation.grad is None or outs[1].representation.grad.abs().max() == 0
    assert outs[0].representation.grad.abs().max() > 0


# -- multitask --------------------------------------------------------------------


MODS = (
    ModalitySpec(name="a", kind="vector", shape=(4,)),
    ModalitySpec(name="b", kind="vector", shape=(3,)),
    ModalitySpec(name="c", kind="image", shape=(2, 2, 1)),
)


def test_multitask_exact_reconstruction_zero():
    decoders = MultitaskDecoders(MODS[:2], clip_len=2, feature_dim=5).double()
    rep = torch.zeros(1, 5, dtype=torch.float64)
    target = torch.randn(1, 2, 3, dtype=torch.float64)
    with torch.no_grad():
        decoders.decoders["a->b"].weight.zero_()
        decoders.decoders["a->b"].bias.copy_(target.reshape(-1))
    loss = decoders.reconstruction_loss("a", rep, {"b": target})
    assert loss.item() < 1e-24


def test_multitask_zero_decoder_unit_variance_target():
    decoders = MultitaskDecoders(MODS[:2], clip_len=4, feature_dim=5).double()
    with torch.no_grad():
        decoders.decoders["a->b"].weight.zero_()
        decoders.decoders["a->b"].bias.zero_()
    gen = torch.Generator().manual_seed(0)
    target = torch.randn(2000, 4, 3, generator=gen, dtype=torch.float64)
    rep = torch.zeros(2000, 5, dtype=torch.float64)
    loss = decoders.reconstruction_loss("a", rep, {"b": target})
    assert abs(loss.item() - 1.0) < 0.05  # mean squared error of zero-mean unit noise


def test_multitask_order_invariant_and_stacked():
    decoders = MultitaskDecoders(MODS, clip_len=2, feature_dim=5).double()
    gen = torch.Generator().manual_seed(1)
    clips = {
        "a": torch.randn(3, 2, 4, generator=gen, dtype=torch.float64),
        "b": torch.randn(3, 2, 3, generator=gen, dtype=torch.float64),
        "c": torch.randn(3, 2, 2, 2, 1, generator=gen, dtype=torch.float64),
    }
    outs = {
        name: ModalityOutputs(torch.randn(3, 5, generator=gen, dtype=torch.float64),
                              torch.randn(3, 2, generator=gen, dtype=torch.float64))
        for name in ("a", "b", "c")
    }
    losses = multitask_recon_loss(decoders, outs, clips)
    assert losses.shape == (3,)
    reordered = decoders.reconstruction_loss(
        "a", outs["a"].representation, {"c": clips["c"], "b": clips["b"], "a": clips["a"]})
    assert torch.allclose(losses[0], reordered, atol=1e-12)


def test_multitask_shape_mismatch():
    decoders = MultitaskDecoders(MODS[:2], clip_len=2, feature_dim=5).double()
    with pytest.raises(Exception, match="target clips"):
        decoders.reconstruction_loss("a", torch.zeros(1, 5).double(),
                                     {"b": torch.zeros(1, 2, 7).double()})


# -- predefined graphs ---------------------------------------------------------------


def test_predefined_graphs():
    empty = build_predefined_graph("empty", 3)
    assert empty.abs().max() == 0
    uniform = build_predefined_graph("uniform", 4)
    off = uniform[~torch.eye(4, dtype=torch.bool)]
    assert torch.allclose(off, torch.full_like(off, 1.0 / 3.0))
    assert uniform.diagonal().abs().max() == 0
    prior = build_predefined_graph("prior", 3, c=torch.tensor([0.5, 0.3, 0.2]))
    out_weight = prior.sum(dim=1)
    assert out_weight[0] > out_weight[1] > out_weight[2]
    assert prior.diagonal().abs().max() == 0
    with pytest.raises(ValueError, match="unknown"):
        build_predefined_graph("tree", 3)
    with pytest.raises(ValueError):
        build_predefined_graph("prior", 3)


def test_strategy_config_validation():
    with pytest.raises(ValueError, match="unknown strategy"):
        StrategyConfig(kind="magic")
    with pytest.raises(ValueError, match="temperature"):
        StrategyConfig(kind="kd", temperature=0)
    cfg = StrategyConfig(kind="learned")
    assert cfg.is_graph
    assert cfg.graph_config().mode == "learned"
    assert not StrategyConfig(kind="kd").is_graph
