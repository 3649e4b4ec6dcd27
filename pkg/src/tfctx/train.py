"""Training and evaluation pipeline glueing features, model, losses and
metrics together, driven by a RunConfig.

Everything is deterministic under the config seed: parameter init, batch
composition and chunk offsets all derive from one generator, and
evaluation embeds center chunks with frozen parameters.
"""

from __future__ import annotations

import os

import numpy as np

from . import backbone, blocks, features, losses, metrics, optim
from .config import RunConfig, to_dict
from .errors import DataError
from .tensor import Tensor, load_tensor, save_tensor

TRAIN_MANIFEST = "train_manifest.txt"
EVAL_MANIFEST = "eval_manifest.txt"
TRIALS_FILE = "trials.txt"


def make_gcm_factory(cfg: RunConfig, rng: np.random.Generator):
    b = cfg.model.block
    if b.kind == "none":
        return None

    def factory(channels: int) -> blocks.GcmBlock:
        kind = {"se": "gap", "att_gcm": "attention", "dct_gcm": "multi_dct"}[b.kind]
        hidden = max(1, int(round(channels * b.attention_hidden_ratio)))
        return blocks.GcmBlock(
            channels, kind=kind, transform=b.transform, reduction=b.reduction,
            attention_hidden=hidden, conv_kernel=b.conv_kernel,
            eca_gamma=b.eca_gamma, eca_b=b.eca_b,
            dct_components=b.dct_components, dct_grid=tuple(b.dct_grid),
            tfe=b.tfe, tfe_groups=b.tfe_groups, tfe_eps=b.tfe_eps,
            tfe_scale_init=b.tfe_scale_init, tfe_shift_init=b.tfe_shift_init,
            tfe_shared=b.tfe_shared, rng=rng)

    return factory


def build_embedder(cfg: RunConfig, rng: np.random.Generator) -> backbone.Embedder:
    m = cfg.model
    return backbone.Embedder(
        mel_bins=cfg.features.n_mels, stage_channels=list(m.stage_channels),
        blocks_per_stage=list(m.blocks_per_stage), stage_strides=list(m.stage_strides),
        stem_stride=tuple(m.stem_stride), embed_dim=m.embed_dim, asp_hidden=m.asp_hidden,
        make_gcm=make_gcm_factory(cfg, rng), insertion=m.block.insertion,
        gcm_stages=m.block.stages, rng=rng)


def fbank_config(cfg: RunConfig) -> features.FbankConfig:
    f = cfg.features
    return features.FbankConfig(sample_rate=f.sample_rate, n_mels=f.n_mels, win_ms=f.win_ms,
                                hop_ms=f.hop_ms, fft_size=f.fft_size, f_min=f.f_min,
                                f_max=f.f_max, log_floor=f.log_floor)


def _cache_dir(cfg: RunConfig) -> str:
    f = cfg.features
    tag = f"fbank_cache_{f.n_mels}x{f.fft_size}_{f.win_ms:g}x{f.hop_ms:g}"
    return os.path.join(cfg.data.data_dir, tag)


def load_features(cfg: RunConfig, rel_paths, use_cache: bool = True) -> dict[str, np.ndarray]:
    """Mean-normalized (n_mels, T) features per relative path; raw fbanks go
    through an on-disk cache in the tensor dump format."""
    fb_cfg = fbank_config(cfg)
    cache_dir = _cache_dir(cfg)
    out = {}
    for rel in rel_paths:
        if rel in out:
            continue
        cache_path = os.path.join(cache_dir, rel + ".tfd")
        fbank = None
        if use_cache and os.path.exists(cache_path):
            with open(cache_path, "rb") as f:
                fbank = load_tensor(f)
        if fbank is None:
            wav = features.read_wav(os.path.join(cfg.data.data_dir, rel))
            fbank = features.compute_fbank(wav, fb_cfg)
            if use_cache:
                os.makedirs(os.path.dirname(cache_path), exist_ok=True)
                with open(cache_path, "wb") as f:
                    save_tensor(f, fbank)
        out[rel] = features.mean_normalize(fbank, cfg.features.mean_norm)
    return out


def _batches(entries, speakers_per_batch: int, m: int, rng: np.random.Generator):
    """One epoch of batches: every speaker's utterances shuffled and paired,
    rounds of shuffled speakers split into groups; a group smaller than two
    speakers is dropped (the prototypical loss needs competition)."""
    by_spk: dict[str, list[str]] = {}
    for spk, rel in entries:
        by_spk.setdefault(spk, []).append(rel)
    speakers = sorted(by_spk)
    pair_lists = {}
    for spk in speakers:
        utts = list(by_spk[spk])
        perm = rng.permutation(len(utts))
        shuffled = [utts[i] for i in perm]
        pair_lists[spk] = [shuffled[i: i + m] for i in range(0, len(shuffled) - m + 1, m)]
    rounds = max(len(p) for p in pair_lists.values())
    for r in range(rounds):
        avail = [spk for spk in speakers if len(pair_lists[spk]) > r]
        order = rng.permutation(len(avail))
        shuffled_spk = [avail[i] for i in order]
        for i in range(0, len(shuffled_spk), speakers_per_batch):
            group = shuffled_spk[i: i + speakers_per_batch]
            if len(group) >= 2:
                yield [(spk, pair_lists[spk][r]) for spk in group]


def train_run(cfg: RunConfig, out_dir: str, quiet: bool = False) -> str:
    """Train per the config; returns the final checkpoint path. Writes
    train.log and one checkpoint per epoch; a non-finite loss or gradient
    aborts with the last finished epoch's checkpoint kept on disk."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = features.read_manifest(os.path.join(cfg.data.data_dir, TRAIN_MANIFEST))
    speakers = sorted({spk for spk, _ in manifest})
    if len(speakers) < 2:
        raise DataError("training needs at least two speakers in the manifest")
    spk_index = {spk: i for i, spk in enumerate(speakers)}
    feats = load_features(cfg, [rel for _, rel in manifest])

    rng = np.random.default_rng(cfg.seed)
    embedder = build_embedder(cfg, rng)
    head = losses.ClassifierHead(len(speakers), cfg.model.embed_dim, rng)
    proto = losses.ProtoParams(cfg.train.proto_scale_init, cfg.train.proto_bias_init)

    named = embedder.named_parameters() + head.named_parameters() + proto.named_parameters()
    tr = cfg.train
    opt = optim.AdamW(named, lr=tr.base_lr, beta1=tr.beta1, beta2=tr.beta2,
                      eps=tr.adam_eps, weight_decay=tr.weight_decay)

    m = tr.utts_per_speaker_batch
    chunk = cfg.features.chunk
    log_path = os.path.join(out_dir, "train.log")
    final_path = os.path.join(out_dir, "checkpoint.ckpt")
    config_doc = to_dict(cfg)

    def save(path):
        entries = [(n, p.data) for n, p in named] + list(embedder.named_state())
        backbone.save_checkpoint(path, entries, config_doc)

    with open(log_path, "a") as log:
        step = 0
        last = None
        for epoch in range(tr.epochs):
            lr = optim.lr_schedule(epoch, tr.base_lr, tr.warmup_epochs,
                                   tr.lr_decay, tr.lr_decay_every)
            opt.lr = lr
            for batch in _batches(manifest, tr.speakers_per_batch, m, rng):
                maps = np.stack([
                    features.chunk_frames(feats[rel], chunk, "random", rng)
                    for _, pair in batch for rel in pair
                ])
                labels = [spk_index[spk] for spk, pair in batch for _ in pair]
                x = Tensor(maps[:, None, :, :])

                emb = embedder.embed(x, training=True)
                grouped = emb.reshape((len(batch), m, cfg.model.embed_dim))
                total, ce, pl = losses.combined_loss(grouped, labels, head, proto)

                opt.zero_grad()
                total.backward()
                opt.step()
                proto.clamp_()

                step += 1
                last = (total.item(), ce, pl)
                log.write(f"{epoch} {step} {lr:.8g} {ce:.8g} {pl:.8g} {last[0]:.8g}\n")
                log.flush()
            if step == 0:
                raise DataError("manifest cannot form a single batch "
                                f"({m} utterances per speaker needed)")
            save(os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.ckpt"))
            if not quiet:
                print(f"epoch {epoch}: lr={lr:.3g} loss={last[0]:.4f} "
                      f"(ce={last[1]:.4f} proto={last[2]:.4f})")
    save(final_path)
    return final_path


def load_embedder(checkpoint_path: str) -> tuple[backbone.Embedder, RunConfig]:
    from .config import from_dict
    doc, arrays = backbone.load_checkpoint(checkpoint_path)
    cfg = from_dict(doc)
    embedder = build_embedder(cfg, np.random.default_rng(cfg.seed))
    model_arrays = {n: arrays[n] for n, _ in embedder.named_parameters() if n in arrays}
    state_names = {n for n, _ in embedder.named_state()}
    missing = ({n for n, _ in embedder.named_parameters()} | state_names) - set(arrays)
    if missing:
        raise DataError(f"checkpoint is missing entries: {sorted(missing)[:4]}")
    model_arrays.update({n: arrays[n] for n in state_names})
    embedder.load_arrays(model_arrays)
    return embedder, cfg


def extract_embeddings(cfg: RunConfig, embedder: backbone.Embedder, rel_paths,
                       batch_size: int = 32) -> dict[str, np.ndarray]:
    """Frozen-parameter center-chunk embeddings for each unique path."""
    unique = sorted(set(rel_paths))
    feats = load_features(cfg, unique)
    chunk = cfg.features.chunk
    out = {}
    for i in range(0, len(unique), batch_size):
        group = unique[i: i + batch_size]
        maps = np.stack([features.chunk_frames(feats[rel], chunk, "center") for rel in group])
        emb = embedder.embed(Tensor(maps[:, None, :, :]), training=False)
        for rel, vec in zip(group, emb.data):
            out[rel] = vec.copy()
    return out


def evaluate_run(cfg: RunConfig, embedder: backbone.Embedder, trials: metrics.TrialSet,
                 out_dir: str):
    """Score the trial list; returns (report_line, eer, min_dcf, skipped_ids).

    Trials whose audio is missing are reported and skipped; the remaining
    trials are scored by cosine between center-chunk embeddings.
    """
    os.makedirs(out_dir, exist_ok=True)
    wanted = set(trials.enroll_ids) | set(trials.test_ids)
    present, skipped = [], []
    for rel in sorted(wanted):
        (present if os.path.exists(os.path.join(cfg.data.data_dir, rel)) else skipped).append(rel)
    if skipped:
        keep = [i for i in range(len(trials))
                if trials.enroll_ids[i] not in skipped and trials.test_ids[i] not in skipped]
        if not keep:
            raise DataError("every trial references missing audio")
        trials = metrics.TrialSet(trials.labels[keep],
                                  tuple(trials.enroll_ids[i] for i in keep),
                                  tuple(trials.test_ids[i] for i in keep))
    embeddings = extract_embeddings(cfg, embedder, present)
    scores = np.array([
        metrics.cosine_score(embeddings[e], embeddings[t])
        for e, t in zip(trials.enroll_ids, trials.test_ids)
    ])

    eer, thr_eer = metrics.compute_eer(trials, scores)
    dcf, thr_dcf = metrics.compute_min_dcf(trials, scores)
    report = metrics.format_report(eer, dcf, thr_eer, thr_dcf)

    metrics.write_scores(os.path.join(out_dir, "scores.txt"), trials, scores)
    metrics.write_det_csv(os.path.join(out_dir, "det.csv"), metrics.det_points(trials, scores))
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(report + "\n")
    return report, eer, dcf, skipped


def synth_corpus(cfg: RunConfig, quiet: bool = False) -> None:
    """Deterministic corpus plus manifests and a balanced held-out trial
    list under cfg.data.data_dir."""
    d = cfg.data
    train, heldout = features.synth_dataset(
        d.data_dir, d.num_speakers, d.utts_per_speaker, d.duration_s,
        cfg.seed, d.eval_utts_per_speaker)
    features.write_manifest(os.path.join(d.data_dir, TRAIN_MANIFEST), train)
    features.write_manifest(os.path.join(d.data_dir, EVAL_MANIFEST), heldout)

    ids_by_speaker: dict[str, list[str]] = {}
    for spk, rel in heldout:
        ids_by_speaker.setdefault(spk, []).append(rel)
    trials = metrics.sample_balanced_trials(ids_by_speaker, d.num_trials,
                                            np.random.default_rng(cfg.seed + 1))
    metrics.write_trials(os.path.join(d.data_dir, TRIALS_FILE), trials)
    if not quiet:
        print(f"wrote {len(train)} training and {len(heldout)} held-out utterances, "
              f"{len(trials)} trials under {d.data_dir}")
