"""Alternative ways to exploit extra training-time modalities.

Three reference mechanisms share the trainers and encoders with the graph
layer so comparisons isolate the routing mechanism itself:

  * kd: high-temperature cross entropy between each receiver's softened
    softmax and every other modality's detached soft targets, pairwise
    averaged
  * cross_modal: squared L2 toward detached senders, on representations and
    softened softmax outputs, pairwise averaged
  * multitask: per-modality linear decoders reconstruct the raw clips of the
    other modalities from the representation (mean squared error)

Plus the predefined-graph variants (empty / uniform / accuracy prior) used by
the graph ablations.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from math import prod

import torch
import torch.nn.functional as F
from torch import nn

from .datagen import ModalitySpec
from .distill import (
    GraphConfig,
    SENDER_WEIGHTED,
    RECEIVER_WEIGHTED,
    prior_graph,
    uniform_graph,
)
from .encoders import ModalityOutputs, ShapeError

GRAPH_KINDS = ("empty", "uniform", "prior", "learned")
BASELINE_KINDS = ("kd", "cross_modal", "multitask")


@dataclass
class StrategyConfig:
    """Which mechanism trains the modalities together, and its weights.

    lambda_logits / lambda_rep carry over to the baselines where the analogous
    level applies (kd and the soft-logit L2 use lambda_logits; representation
    L2 and reconstruction use lambda_rep) so comparisons only vary mechanism.
    """

    kind: str = "learned"
    temperature: float = 2.0
    alpha: float = 10.0
    lambda_logits: float = 10.0
    lambda_rep: float = 5.0
    embed_dim: int = 128
    prior_orientation: str = SENDER_WEIGHTED
    normalization_axis: str = "sender"
    use_prior: bool = True

    def __post_init__(self):
        if self.kind not in GRAPH_KINDS + BASELINE_KINDS:
            raise ValueError(
                f"unknown strategy kind {self.kind!r} (choose from {GRAPH_KINDS + BASELINE_KINDS})"
            )
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.prior_orientation not in (SENDER_WEIGHTED, RECEIVER_WEIGHTED):
            raise ValueError(f"unknown prior orientation {self.prior_orientation!r}")

    @property
    def is_graph(self) -> bool:
        return self.kind in GRAPH_KINDS

    def graph_config(self) -> GraphConfig:
        return GraphConfig(
            mode=self.kind,
            alpha=self.alpha,
            lambda_logits=self.lambda_logits,
            lambda_rep=self.lambda_rep,
            embed_dim=self.embed_dim,
            prior_orientation=self.prior_orientation,
            normalization_axis=self.normalization_axis,
            use_prior=self.use_prior,
        )


def _soft_probs(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    return torch.softmax(logits / temperature, dim=-1)


def kd_loss(outputs: Sequence[ModalityOutputs], temperature: float = 2.0) -> torch.Tensor:
    """Per-modality soft-target cross entropy, averaged over the other modalities.

    Entry k is mean_j != k of E_b[-sum_c p_j(c) log p_k(c)] with p the
    temperature-softened softmax and senders detached.
    """
    if len(outputs) < 2:
        raise ValueError(f"distillation needs >= 2 modalities, got {len(outputs)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    log_probs = [F.log_softmax(o.logits / temperature, dim=-1) for o in outputs]
    targets = [_soft_probs(o.logits.detach(), temperature) for o in outputs]
    losses = []
    for k in range(len(outputs)):
        terms = [
            -(targets[j] * log_probs[k]).sum(dim=-1).mean()
            for j in range(len(outputs))
            if j != k
        ]
        losses.append(sum(terms) / len(terms))
    return torch.stack(losses)


def cross_modal_loss(outputs: Sequence[ModalityOutputs], temperature: float = 2.0,
                     weight_logits: float = 1.0, weight_rep: float = 1.0) -> torch.Tensor:
    """Per-modality squared-L2 imitation on representations and soft outputs.

    Entry k is mean_j != k of E_b[ weight_rep * |r_k - r_j|^2
    + weight_logits * |p_k - p_j|^2 ] with senders detached.
    """
    if len(outputs) < 2:
        raise ValueError(f"distillation needs >= 2 modalities, got {len(outputs)}")
    probs = [_soft_probs(o.logits, temperature) for o in outputs]
    losses = []
    for k in range(len(outputs)):
        terms = []
        for j in range(len(outputs)):
            if j == k:
                continue
            rep_term = (outputs[k].representation - outputs[j].representation.detach()).pow(2).sum(dim=-1)
            logit_term = (probs[k] - probs[j].detach()).pow(2).sum(dim=-1)
            terms.append((weight_rep * rep_term + weight_logits * logit_term).mean())
        losses.append(sum(terms) / len(terms))
    return torch.stack(losses)


class MultitaskDecoders(nn.Module):
    """One linear decoder per ordered modality pair, predicting raw clips.

    The decoder for (source, target) maps the source representation to a
    flattened clip of the target modality and is trained jointly with the
    encoders.
    """

    def __init__(self, modalities: Sequence[ModalitySpec], clip_len: int, feature_dim: int):
        super().__init__()
        self.clip_shapes = {m.name: (int(clip_len), *m.shape) for m in modalities}
        self.decoders = nn.ModuleDict()
        for src in self.clip_shapes:
            for tgt, shape in self.clip_shapes.items():
                if src != tgt:
                    self.decoders[f"{src}->{tgt}"] = nn.Linear(feature_dim, prod(shape))

    def reconstruction_loss(self, source: str, representation: torch.Tensor,
                            clips: dict[str, torch.Tensor]) -> torch.Tensor:
        """Sum over other modalities of the mean squared reconstruction error."""
        total = representation.new_zeros(())
        for tgt, shape in self.clip_shapes.items():
            if tgt == source:
                continue
            if tgt not in clips:
                raise ShapeError(f"missing raw clips for modality {tgt!r}")
            target = clips[tgt]
            if tuple(target.shape[1:]) != shape:
                raise ShapeError(
                    f"decoder {source}->{tgt}: target clips {tuple(target.shape[1:])} != {shape}"
                )
            pred = self.decoders[f"{source}->{tgt}"](representation)
            pred = pred.reshape(target.shape[0], *shape)
            total = total + F.mse_loss(pred, target.to(pred.dtype))
        return total


def multitask_recon_loss(decoders: MultitaskDecoders,
                         outputs: dict[str, ModalityOutputs],
                         clips: dict[str, torch.Tensor]) -> torch.Tensor:
    """Per-modality reconstruction losses, stacked in `outputs` order."""
    return torch.stack(
        [
            decoders.reconstruction_loss(name, out.representation, clips)
            for name, out in outputs.items()
        ]
    )


def build_predefined_graph(kind: str, num_modalities: int,
                           c: torch.Tensor | None = None) -> torch.Tensor:
    """Constant edge-weight matrix for the predefined-graph ablations.

    empty: all zeros.  uniform: 1/(S-1) off-diagonal.  prior: row j carries
    the accuracy weight c_j on every outgoing edge (sender-weighted).
    """
    if kind == "empty":
        return torch.zeros(num_modalities, num_modalities)
    if kind == "uniform":
        return uniform_graph(num_modalities)
    if kind == "prior":
        if c is None:
            raise ValueError("prior graph needs the per-modality accuracy vector")
        g = prior_graph(torch.as_tensor(c), SENDER_WEIGHTED)
        g.fill_diagonal_(0.0)
        return g
    raise ValueError(f"unknown predefined graph kind {kind!r}")
