"""Finite-difference verification of every block variant, both losses and a
miniature end-to-end network.

Shapes are kept tiny so central differences over every parameter stay
cheap; inputs are continuous random draws, which keeps the checks away
from relu/max kinks almost surely.
"""

from __future__ import annotations

import numpy as np

from . import backbone, blocks, losses
from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-4

BLOCK_VARIANTS = [
    ("se_fc", dict(kind="gap", transform="fc")),
    ("se_conv1d", dict(kind="gap", transform="conv1d")),
    ("att_gcm_fc", dict(kind="attention", transform="fc")),
    ("att_gcm_conv1d", dict(kind="attention", transform="conv1d")),
    ("att_gcm_tfe", dict(kind="attention", transform="fc", tfe=True)),
    ("dct_gcm_fc", dict(kind="multi_dct", transform="fc")),
    ("dct_gcm_conv1d", dict(kind="multi_dct", transform="conv1d")),
    ("dct_gcm_tfe", dict(kind="multi_dct", transform="fc", tfe=True)),
]


def _block_error(variant_kwargs: dict, seed: int) -> float:
    rng = np.random.default_rng(seed)
    block = blocks.GcmBlock(8, reduction=4, dct_grid=(3, 4), dct_components=3,
                            tfe_groups=4, tfe_scale_init=0.4, rng=rng,
                            **variant_kwargs)
    x = rng.normal(size=(2, 8, 3, 4))
    target = Tensor(rng.normal(size=(2, 8, 3, 4)))

    def loss_of(m):
        return T.mul(blocks.gcm_block_forward(m, block), target).sum()

    input_err = T.finite_diff_check(loss_of, Tensor(x))
    fixed = Tensor(x)
    param_errs = T.finite_diff_check_params(lambda: loss_of(fixed), block.named_parameters())
    return max([input_err, *param_errs.values()])


def _loss_errors(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    batch = rng.normal(size=(3, 2, 6))
    batch /= np.linalg.norm(batch, axis=2, keepdims=True)
    head = losses.ClassifierHead(3, 6, rng)
    proto = losses.ProtoParams()
    labels = [0, 0, 1, 1, 2, 2]

    ce_in = T.finite_diff_check(
        lambda t: losses.softmax_ce_loss(T.reshape(t, (6, 6)), labels, head), Tensor(batch))
    fixed = Tensor(batch)
    ce_params = T.finite_diff_check_params(
        lambda: losses.softmax_ce_loss(T.reshape(fixed, (6, 6)), labels, head),
        head.named_parameters())

    proto_in = T.finite_diff_check(
        lambda t: losses.angular_proto_loss(t, proto), Tensor(batch))
    proto_params = T.finite_diff_check_params(
        lambda: losses.angular_proto_loss(fixed, proto), proto.named_parameters())

    return {
        "loss_softmax_ce": max([ce_in, *ce_params.values()]),
        "loss_angular_proto": max([proto_in, *proto_params.values()]),
    }


def micro_network(seed: int):
    """Smallest full pipeline that exercises every component at once."""
    rng = np.random.default_rng(seed)
    factory_rng = np.random.default_rng(seed + 1)

    def make_gcm(channels):
        return blocks.GcmBlock(channels, kind="attention", transform="fc", reduction=2,
                               attention_hidden=2, tfe=True, tfe_groups=2,
                               tfe_scale_init=0.3, rng=factory_rng)

    embedder = backbone.Embedder(
        mel_bins=8, stage_channels=[2, 2, 4, 4], blocks_per_stage=[1, 1, 1, 1],
        stage_strides=[1, 2, 2, 1], stem_stride=(1, 1), embed_dim=6, asp_hidden=3,
        make_gcm=make_gcm, insertion="after_bn", rng=rng)
    head = losses.ClassifierHead(2, 6, rng)
    proto = losses.ProtoParams()
    x = Tensor(rng.normal(size=(4, 1, 8, 12)))
    labels = [0, 0, 1, 1]
    return embedder, head, proto, x, labels


def _full_network_error(seed: int) -> float:
    embedder, head, proto, x, labels = micro_network(seed)

    def loss():
        emb = embedder.embed(x, training=True)
        total, _, _ = losses.combined_loss(emb.reshape((2, 2, 6)), labels, head, proto)
        return total

    named = embedder.named_parameters() + head.named_parameters() + proto.named_parameters()
    errs = T.finite_diff_check_params(loss, named)
    return max(errs.values())


def run_grad_checks(seed: int = 1234, include_full_network: bool = True) -> dict[str, float]:
    """Max relative gradient error per block/loss variant (and the full
    miniature network); every entry must come in under TOLERANCE."""
    report: dict[str, float] = {}
    for i, (name, kwargs) in enumerate(BLOCK_VARIANTS):
        report[name] = _block_error(kwargs, seed + i)
    report.update(_loss_errors(seed + 100))
    if include_full_network:
        report["full_network"] = _full_network_error(seed + 200)
    return report
