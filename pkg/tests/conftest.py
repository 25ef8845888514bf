import numpy as np
import pytest
import torch

from graphdistill import datagen
from graphdistill.encoders import ModalityOutputs


@pytest.fixture(scope="session")
def tiny_spec():
    return datagen.make_complementary_spec(
        num_modalities=2, num_classes=4, train_per_class=8, test_per_class=4,
        example_frames=16, pattern_frames=6, image_shape=(6, 6, 1), vector_dim=10,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    return datagen.generate_classification_corpus(tiny_spec, seed=3)


def random_outputs(num_modalities, batch=4, feature_dim=12, num_classes=5,
                   seed=0, dtype=torch.float64, requires_grad=False):
    """Stack of random per-modality outputs for loss-level tests."""
    gen = torch.Generator().manual_seed(seed)
    outs = []
    for _ in range(num_modalities):
        rep = torch.randn(batch, feature_dim, generator=gen, dtype=dtype)
        logits = torch.randn(batch, num_classes, generator=gen, dtype=dtype)
        if requires_grad:
            rep.requires_grad_(True)
            logits.requires_grad_(True)
        outs.append(ModalityOutputs(representation=rep, logits=logits))
    return outs
