"""Distillation routed by a per-example directed graph over modalities.

Messages are directional imitation losses between modality outputs (cosine
distance on logits and on representations, weighted and summed).  An
edge-weight matrix decides how strongly each modality imitates each other
one; it can be fixed (empty / uniform / accuracy prior) or learned per
example from the modality outputs and normalized with a scaled row softmax.
A constant rank-one prior graph built from per-modality validation accuracy
can be added on top of the learned graph.

Conventions, used consistently everywhere:
  * matrix entry [j, k] is the edge j -> k (sender j, receiver k)
  * message senders are detached: a message pulls the receiver toward the
    sender and never feeds gradient back into the sender
  * diagonals are exactly zero (no self-imitation)
"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import ModalityOutputs, ShapeError

COSINE_EPS = 1e-8

SENDER_WEIGHTED = "sender_weighted"
RECEIVER_WEIGHTED = "receiver_weighted"


def cosine_distance(u: torch.Tensor, v: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """1 - u.v / max(|u||v|, eps), along the last dimension (broadcasting allowed)."""
    if u.shape[-1] != v.shape[-1]:
        raise ShapeError(f"cosine distance: last dims differ, {tuple(u.shape)} vs {tuple(v.shape)}")
    dot = (u * v).sum(dim=-1)
    denom = torch.clamp(u.norm(dim=-1) * v.norm(dim=-1), min=eps)
    return 1.0 - dot / denom


def pairwise_message(receiver: ModalityOutputs, sender: ModalityOutputs,
                     lambda_logits: float = 10.0, lambda_rep: float = 5.0) -> torch.Tensor:
    """Directional per-example message: weighted cosine distances, sender detached.

    Returns a (B,) tensor of nonnegative values.  Gradient flows only into the
    receiving modality's outputs.
    """
    if lambda_logits < 0 or lambda_rep < 0:
        raise ValueError("message weights must be nonnegative")
    logits_term = cosine_distance(receiver.logits, sender.logits.detach())
    rep_term = cosine_distance(receiver.representation, sender.representation.detach())
    return lambda_logits * logits_term + lambda_rep * rep_term


def message_matrix(outputs: Sequence[ModalityOutputs],
                   lambda_logits: float = 10.0, lambda_rep: float = 5.0,
                   senders: Sequence[ModalityOutputs] | None = None) -> torch.Tensor:
    """All ordered pairwise messages as a (B, S, S) tensor, zero diagonal.

    Entry [b, j, k] is the message from modality j into modality k for
    example b.  Values are symmetric in (j, k) because cosine distance is;
    the direction lives in the gradient, which reaches only the receiver.
    `senders` substitutes explicit constant outputs for the sender side
    (used by the finite-difference oracle, which must differentiate the same
    frozen-sender function that training does).
    """
    if len(outputs) < 2:
        raise ValueError(f"message matrix needs >= 2 modalities, got {len(outputs)}")
    if lambda_logits < 0 or lambda_rep < 0:
        raise ValueError("message weights must be nonnegative")
    senders = outputs if senders is None else senders
    if len(senders) != len(outputs):
        raise ShapeError(f"{len(senders)} sender outputs for {len(outputs)} modalities")
    logits = torch.stack([o.logits for o in outputs], dim=1)           # (B, S, L)
    reps = torch.stack([o.representation for o in outputs], dim=1)     # (B, S, D)
    sent_logits = torch.stack([o.logits.detach() for o in senders], dim=1)
    sent_reps = torch.stack([o.representation.detach() for o in senders], dim=1)
    # broadcast sender (dim 1) against receiver (dim 2)
    logits_term = cosine_distance(sent_logits.unsqueeze(2), logits.unsqueeze(1))
    rep_term = cosine_distance(sent_reps.unsqueeze(2), reps.unsqueeze(1))
    m = lambda_logits * logits_term + lambda_rep * rep_term            # (B, S, S)
    mask = 1.0 - torch.eye(len(outputs), dtype=m.dtype, device=m.device)
    return m * mask


class GraphLearner(nn.Module):
    """Raw (pre-normalization) edge scores from per-modality outputs.

    Each modality is embedded from its representation and logits by two
    linear maps; an edge score is a third linear map over the concatenated
    sender and receiver embeddings, applied to every ordered pair.
    """

    def __init__(self, feature_dim: int, num_classes: int, embed_dim: int = 128):
        super().__init__()
        self.feature_dim = int(feature_dim)
        self.num_classes = int(num_classes)
        self.embed_dim = int(embed_dim)
        self.rep_embed = nn.Linear(feature_dim, embed_dim, bias=False)
        self.logit_embed = nn.Linear(num_classes, embed_dim, bias=False)
        self.edge_score = nn.Linear(2 * embed_dim, 1, bias=False)

    def forward(self, outputs: Sequence[ModalityOutputs]) -> torch.Tensor:
        """Raw edge scores (B, S, S); entry [b, j, k] scores the edge j -> k."""
        if len(outputs) < 2:
            raise ValueError(f"graph needs >= 2 modalities, got {len(outputs)}")
        for o in outputs:
            if o.representation.shape[-1] != self.feature_dim:
                raise ShapeError(
                    f"graph learner: representation dim {o.representation.shape[-1]} != {self.feature_dim}"
                )
            if o.logits.shape[-1] != self.num_classes:
                raise ShapeError(
                    f"graph learner: logits dim {o.logits.shape[-1]} != {self.num_classes}"
                )
        z = torch.stack(
            [self.rep_embed(o.representation) + self.logit_embed(o.logits) for o in outputs],
            dim=1,
        )  # (B, S, dz)
        num = z.shape[1]
        sender = z.unsqueeze(2).expand(-1, -1, num, -1)
        receiver = z.unsqueeze(1).expand(-1, num, -1, -1)
        return self.edge_score(torch.cat([sender, receiver], dim=-1)).squeeze(-1)


def normalize_graph(raw: torch.Tensor, alpha: float = 10.0, axis: str = "sender") -> torch.Tensor:
    """Scaled softmax normalization of raw edge scores, diagonal masked out.

    axis="sender" (default) normalizes each row j over receivers, exactly the
    written row form; axis="receiver" normalizes each column k over senders,
    matching how the losses are later summed per receiver.
    """
    if alpha <= 0:
        raise ValueError(f"softmax scale must be positive, got {alpha}")
    if raw.shape[-1] != raw.shape[-2]:
        raise ShapeError(f"graph must be square, got {tuple(raw.shape)}")
    dim = {"sender": -1, "receiver": -2}.get(axis)
    if dim is None:
        raise ValueError(f"unknown normalization axis {axis!r}")
    eye = torch.eye(raw.shape[-1], dtype=torch.bool, device=raw.device)
    masked = raw.masked_fill(eye, float("-inf"))
    return torch.softmax(alpha * masked, dim=dim)


def validate_prior(c: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(c, dtype=torch.get_default_dtype())
    if c.ndim != 1:
        raise ShapeError(f"prior vector must be 1-D, got shape {tuple(c.shape)}")
    if (c < 0).any():
        raise ValueError("prior vector entries must be nonnegative")
    total = float(c.sum())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"prior vector must sum to 1, got {total}")
    return c


def prior_graph(c: torch.Tensor, orientation: str = SENDER_WEIGHTED) -> torch.Tensor:
    """Constant rank-one graph from the per-modality accuracy vector c.

    sender_weighted: edge (j, k) carries c_j, so accurate modalities send more.
    receiver_weighted: edge (j, k) carries c_k (the literal bias-term form).
    """
    c = validate_prior(c)
    num = c.shape[0]
    if orientation == SENDER_WEIGHTED:
        return c.unsqueeze(1).expand(num, num).clone()
    if orientation == RECEIVER_WEIGHTED:
        return c.unsqueeze(0).expand(num, num).clone()
    raise ValueError(f"unknown prior orientation {orientation!r}")


def imitation_loss_vector(g_eff: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Per-receiver imitation losses: column sums of the elementwise product.

    g_eff and m are (..., S, S); returns (..., S) where entry k is
    sum_j g_eff[j, k] * m[j, k].
    """
    if g_eff.shape[-2:] != m.shape[-2:]:
        raise ShapeError(
            f"graph/message shape mismatch: {tuple(g_eff.shape)} vs {tuple(m.shape)}"
        )
    return (g_eff * m).sum(dim=-2)


def classification_loss(logits: torch.Tensor, labels: torch.Tensor,
                        class_weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over the batch of (optionally class-weighted) softmax cross entropy.

    Weights multiply each example's loss directly (mean-1 weights leave
    balanced data unchanged), rather than re-normalizing the mean.
    """
    num_classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"label out of range: got [{int(labels.min())}, {int(labels.max())}] "
            f"for {num_classes} classes"
        )
    per_example = F.cross_entropy(logits, labels, reduction="none")
    if class_weights is not None:
        per_example = per_example * class_weights.to(per_example.dtype)[labels]
    return per_example.mean()


def total_loss(outputs: Sequence[ModalityOutputs], labels: torch.Tensor,
               g_eff: torch.Tensor | None,
               lambda_logits: float = 10.0, lambda_rep: float = 5.0,
               class_weights: torch.Tensor | None = None,
               senders: Sequence[ModalityOutputs] | None = None) -> torch.Tensor:
    """Joint objective: every modality's classification loss plus its imitation loss.

    g_eff is the effective edge-weight matrix ((S, S) constant or (B, S, S)
    per example); None or all-zero means plain per-modality cross entropy.
    """
    loss = sum(classification_loss(o.logits, labels, class_weights) for o in outputs)
    if g_eff is not None:
        m = message_matrix(outputs, lambda_logits, lambda_rep, senders=senders)
        loss = loss + imitation_loss_vector(g_eff, m).sum(dim=-1).mean()
    return loss


class GraphConfig:
    """Settings for the distillation graph and messages."""

    MODES = ("empty", "uniform", "prior", "learned")

    def __init__(self, mode: str = "learned", alpha: float = 10.0,
                 lambda_logits: float = 10.0, lambda_rep: float = 5.0,
                 embed_dim: int = 128, prior_orientation: str = SENDER_WEIGHTED,
                 normalization_axis: str = "sender", use_prior: bool = True):
        if mode not in self.MODES:
            raise ValueError(f"unknown graph mode {mode!r} (choose from {self.MODES})")
        if prior_orientation not in (SENDER_WEIGHTED, RECEIVER_WEIGHTED):
            raise ValueError(f"unknown prior orientation {prior_orientation!r}")
        self.mode = mode
        self.alpha = float(alpha)
        self.lambda_logits = float(lambda_logits)
        self.lambda_rep = float(lambda_rep)
        self.embed_dim = int(embed_dim)
        self.prior_orientation = prior_orientation
        self.normalization_axis = normalization_axis
        self.use_prior = bool(use_prior)


class GraphDistillation(nn.Module):
    """The attachable layer: turns per-modality outputs into imitation losses.

    Fixed modes hold a constant graph; learned mode runs the graph learner,
    normalizes, and adds the prior graph.  `set_prior` installs the
    validation-accuracy vector once it is known (curriculum stage two).
    """

    def __init__(self, num_modalities: int, feature_dim: int, num_classes: int,
                 config: GraphConfig):
        super().__init__()
        if num_modalities < 2:
            raise ValueError("graph distillation needs >= 2 modalities")
        self.num_modalities = int(num_modalities)
        self.config = config
        self.learner = None
        if config.mode == "learned":
            self.learner = GraphLearner(feature_dim, num_classes, config.embed_dim)
        self.register_buffer("fixed_graph", torch.zeros(num_modalities, num_modalities))
        self.register_buffer("prior", torch.zeros(num_modalities))
        self.has_prior = False
        if config.mode == "uniform":
            self.fixed_graph.copy_(uniform_graph(num_modalities))

    def set_prior(self, c) -> None:
        c = validate_prior(torch.as_tensor(c, dtype=self.prior.dtype))
        if c.shape[0] != self.num_modalities:
            raise ShapeError(f"prior has {c.shape[0]} entries for {self.num_modalities} modalities")
        self.prior.copy_(c)
        self.has_prior = True
        if self.config.mode == "prior":
            g = prior_graph(self.prior, self.config.prior_orientation).clone()
            g.fill_diagonal_(0.0)
            self.fixed_graph.copy_(g)

    def effective_graph(self, outputs: Sequence[ModalityOutputs]) -> torch.Tensor | None:
        if self.config.mode == "empty":
            return None
        if self.config.mode in ("uniform", "prior"):
            return self.fixed_graph
        raw = self.learner(outputs)
        g = normalize_graph(raw, self.config.alpha, self.config.normalization_axis)
        if self.config.use_prior and self.has_prior:
            g = g + prior_graph(self.prior, self.config.prior_orientation).to(g.dtype)
        return g

    def imitation_losses(self, outputs: Sequence[ModalityOutputs]) -> torch.Tensor | None:
        """Per-modality imitation losses averaged over the batch, or None when empty."""
        g = self.effective_graph(outputs)
        if g is None:
            return None
        m = message_matrix(outputs, self.config.lambda_logits, self.config.lambda_rep)
        per_example = imitation_loss_vector(g, m)
        return per_example.mean(dim=0) if per_example.ndim == 2 else per_example


def uniform_graph(num_modalities: int) -> torch.Tensor:
    """Equal off-diagonal weights 1/(S-1); the fixed curriculum-stage graph."""
    if num_modalities < 2:
        raise ValueError("uniform graph needs >= 2 modalities")
    g = torch.full((num_modalities, num_modalities), 1.0 / (num_modalities - 1))
    g.fill_diagonal_(0.0)
    return g


def write_graph_snapshots(path, snapshots: dict[str, "torch.Tensor"], names: Sequence[str]) -> None:
    """Dump tagged edge-weight matrices as a tab-separated table.

    One row per (tag, sender, receiver) with the weight; consumed by the plot
    emitter for per-class weight-rank inspection.
    """
    lines = ["tag\tsender\treceiver\tweight"]
    for tag, g in snapshots.items():
        g = torch.as_tensor(g)
        for j, sender in enumerate(names):
            for k, receiver in enumerate(names):
                if j == k:
                    continue
                lines.append(f"{tag}\t{sender}\t{receiver}\t{float(g[j, k]):.8f}")
    Path(path).write_text("\n".join(lines) + "\n")
