"""Supervised warm-up of the toy LVLM, caption model and selector text encoder, then freezing."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import numerics as nx
from .. import vocab
from ..captioner import CaptionConfig, CaptionModel
from ..lvlm import LvlmConfig, ToyLVLM
from ..nn import Adam, Linear
from ..numerics import Tape, Tensor, backward
from ..selector import SelectorConfig, SelectorModel
from ..vocab import COLORS, KINDS
from .data import GRID, SyntheticSample, target_caption


class WarmupError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    vision_steps: int = 300
    lvlm_steps: int = 3500  # full-image phase
    mix_steps: int = 1500  # mixture phase that also teaches caption reading
    caption_steps: int = 1200
    text_steps: int = 400
    batch_size: int = 64
    lr: float = 1e-3
    clip: float | None = 5.0
    floor: float = 0.9
    freeze_encoder: bool = True  # keep the vision warm-up features fixed while the LM learns
    max_rounds: int = 3  # extra LVLM rounds granted before giving up on the floor
    subset_sizes: tuple = (1, 1, 2, 2, 3, 4, 8)
    # LVLM item mixture: full image / guided caption / raster caption / no caption
    mix: tuple = (0.3, 0.35, 0.2, 0.15)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Models:
    lvlm: ToyLVLM
    captioner: CaptionModel
    selector: SelectorModel

    def checksums(self) -> dict:
        return {"lvlm": self.lvlm.checksum(), "captioner": self.captioner.checksum(),
                "selector": self.selector.checksum()}


def build_models(seed: int, lvlm_cfg: LvlmConfig | None = None, cap_cfg: CaptionConfig | None = None,
                 sel_cfg: SelectorConfig | None = None) -> Models:
    lvlm = ToyLVLM(lvlm_cfg, seed=seed)
    return Models(lvlm, CaptionModel(cap_cfg, lvlm.encoder, seed=seed),
                  SelectorModel(sel_cfg, seed=seed))


# ---------------------------------------------------------------------------
# batched teacher-forced LVLM loss
# ---------------------------------------------------------------------------


def lvlm_batch_loss(lvlm: ToyLVLM, grids, items, feats: np.ndarray | None = None) -> Tensor:
    """Mean answer-token NLL; ``items`` = [(visible cell indices, caption, q, answer)].

    Item ``i`` reads the encoder output of ``grids[i]``, or the constant
    ``feats[i]`` (shape (1+N, d_v)) when precomputed features are given.
    Sequences are [V_sel; caption; Q; answer[:-1]] assembled by one gather.
    """
    n = lvlm.cfg.n_patches
    d = lvlm.cfg.d_model
    enc = lvlm.encoder(grids) if feats is None else Tensor._wrap(np.asarray(feats))
    b = enc.shape[0]
    patches = nx.take(nx.reshape(enc, (b * (n + 1), enc.shape[2])),
                      (np.arange(b)[:, None] * (n + 1) + 1 + np.arange(n)).ravel(), axis=0)
    vis = lvlm.connector(patches)  # (B*N, d)
    texts: list[int] = []
    layouts = []
    for i, (cells, cap, q, ans) in enumerate(items):
        cap = vocab.strip_eos(cap)
        layouts.append((i, list(cells), len(texts), len(cap) + len(q), len(ans)))
        texts.extend(cap + list(q) + list(ans[:-1]))
    t_max = max(len(c) + nt + na - 1 for _, c, _, nt, na in layouts)
    table = nx.concat([vis, nx.take(lvlm.lm.tok_emb.weight, np.asarray(texts, dtype=np.int64), axis=0),
                       Tensor._wrap(np.zeros((1, d)))], axis=0)
    pad = b * n + len(texts)
    idx = np.full((len(items), t_max), pad, dtype=np.int64)
    tgt = np.zeros((len(items), t_max), dtype=np.int64)
    mask = np.zeros((len(items), t_max))
    for row, (i, cells, t0, nt, na) in enumerate(layouts):
        nv = len(cells)
        idx[row, :nv] = i * n + np.asarray(cells, dtype=np.int64)
        idx[row, nv: nv + nt + na - 1] = b * n + t0 + np.arange(nt + na - 1)
        start = nv + nt - 1
        tgt[row, start: start + na] = items[row][3]
        mask[row, start: start + na] = 1.0
    pl = None
    if lvlm.cfg.prefix_attention:
        pl = np.array([len(c) + nt for _, c, _, nt, _ in layouts])
    h = lvlm.lm.hidden(nx.take(table, idx, axis=0), prefix_len=pl)
    # the vocabulary head only runs where an answer token is predicted
    rows = np.flatnonzero(mask.ravel())
    h = nx.take(nx.reshape(h, (len(items) * t_max, d)), rows, axis=0)
    logp = nx.log_softmax(lvlm.lm.head(h), axis=-1)
    return nx.mul(nx.tsum(nx.pick(logp, tgt.ravel()[rows])), -1.0 / len(rows))


def _lvlm_item(s: SyntheticSample, rng, cfg: PretrainConfig, n: int, mix=None):
    mix = np.asarray(cfg.mix if mix is None else mix, dtype=float)
    kind = int(rng.choice(4, p=mix / mix.sum()))
    if kind == 0:
        return list(range(n)), [], s.question, s.answer
    k = int(rng.choice(cfg.subset_sizes))
    cells = np.sort(rng.choice(n, size=k, replace=False))
    lost = np.setdiff1d(np.arange(n), cells)
    cap = [] if kind == 3 else target_caption(s, lost, guided=kind == 1)
    return list(cells), cap, s.question, s.answer


def lvlm_accuracy(lvlm: ToyLVLM, samples) -> float:
    """Exact-match accuracy of greedy answers on unpruned inputs."""
    hits = 0
    for s in samples:
        v = lvlm.encode_image(s.image)
        ans, _ = lvlm.generate(lvlm.connect(v), s.question)
        hits += ans == list(s.answer)
    return hits / len(samples)


def _train_loop(params, loss_fn, steps, cfg, log, tag, log_every=0):
    opt = Adam(params, lr=cfg.lr, clip=cfg.clip)
    for p in params:
        p.requires_grad = True
    for step in range(steps):
        with Tape() as tape:
            loss = loss_fn(step)
        backward(loss, tape, params=opt.params)
        opt.step()
        if step % 50 == 0 or step == steps - 1:
            log.append({"stage": tag, "step": step, "loss": loss.item()})
            if log_every and step % log_every == 0:
                print(f"{tag} {step}: {loss.item():.4f}", flush=True)


def patch_labels(sample: SyntheticSample, n: int) -> tuple:
    """Per-patch (color, kind, row, col) class ids; color and kind 0 mean an empty cell."""
    if n != GRID * GRID:
        raise ValueError(f"patch labels assume one patch per grid cell, got {n} patches")
    color, kind = np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    for sh in sample.scene:
        color[sh.cell] = 1 + COLORS.index(sh.color)
        kind[sh.cell] = 1 + KINDS.index(sh.kind)
    cells = np.arange(n)
    return color, kind, cells // GRID, cells % GRID


def pretrain_vision(lvlm: ToyLVLM, data, cfg: PretrainConfig, seed: int, log: list,
                    log_every: int = 0) -> None:
    """Supervised per-patch attribute readout, standing in for a pretrained image tower."""
    rng = np.random.default_rng([seed, 10])
    n = lvlm.cfg.n_patches
    grids = np.stack([s.image.grid for s in data])
    labels = [patch_labels(s, n) for s in data]
    heads = [Linear(lvlm.cfg.d_v, k, rng) for k in (1 + len(COLORS), 1 + len(KINDS), GRID, GRID)]
    enc = lvlm.encoder

    def loss_fn(step):
        pick = rng.choice(len(data), size=cfg.batch_size, replace=False)
        out = enc(grids[pick])
        b = len(pick)
        flat = nx.take(nx.reshape(out, (b * (n + 1), out.shape[2])),
                       (np.arange(b)[:, None] * (n + 1) + 1 + np.arange(n)).ravel(), axis=0)
        total = None
        for j, head in enumerate(heads):
            tgt = np.concatenate([labels[i][j] for i in pick])
            term = nx.mean(nx.pick(nx.log_softmax(head(flat), axis=-1), tgt))
            total = term if total is None else nx.add(total, term)
        return nx.mul(total, -1.0)

    params = enc.parameters() + [p for h in heads for p in h.parameters()]
    _train_loop(params, loss_fn, cfg.vision_steps, cfg, log, "vision", log_every)


def pretrain_lvlm(lvlm: ToyLVLM, data, cfg: PretrainConfig, seed: int, log: list, steps=None,
                  log_every: int = 0, mix=None) -> None:
    rng = np.random.default_rng([seed, 11])
    n = lvlm.cfg.n_patches
    grids = np.stack([s.image.grid for s in data])
    feats, params = None, lvlm.parameters()
    if cfg.freeze_encoder:
        lvlm.encoder.set_trainable(False)
        feats = lvlm.encoder(grids).data
        params = lvlm.connector.parameters() + lvlm.lm.parameters()

    def loss_fn(step):
        pick = rng.choice(len(data), size=cfg.batch_size, replace=False)
        items = [_lvlm_item(data[i], rng, cfg, n, mix) for i in pick]
        return lvlm_batch_loss(lvlm, grids[pick], items, None if feats is None else feats[pick])

    _train_loop(params, loss_fn, cfg.mix_steps if steps is None else steps, cfg, log, "lvlm",
                log_every)


def pretrain_captioner(models: Models, data, cfg: PretrainConfig, seed: int, log: list,
                       log_every: int = 0) -> None:
    """Teach [Q; proj(V_l); <bos>] -> ground-truth caption of the objects in V_l."""
    rng = np.random.default_rng([seed, 12])
    lvlm, cap = models.lvlm, models.captioner
    n = lvlm.cfg.n_patches
    feats = np.stack([v.patches for v in lvlm.encode_batch(np.stack([s.image.grid for s in data]))])

    def loss_fn(step):
        items = []
        for i in rng.choice(len(data), size=cfg.batch_size, replace=False):
            s = data[i]
            k = int(rng.choice((0,) + tuple(cfg.subset_sizes)))
            keep = rng.choice(n, size=k, replace=False)
            lost = np.setdiff1d(np.arange(n), keep)
            guided = rng.random() < 0.6
            items.append((feats[i][lost], s.question if guided else [],
                          target_caption(s, lost, guided=guided)))
        lps = cap.batch_logprobs(items)
        ntok = sum(len(c) for _, _, c in items)
        return nx.mul(nx.tsum(lps), -1.0 / ntok)

    _train_loop(cap.parameters(), loss_fn, cfg.caption_steps, cfg, log, "captioner", log_every)


def pretrain_text_encoder(models: Models, data, cfg: PretrainConfig, seed: int, log: list,
                          log_every: int = 0) -> None:
    """Warm T up by predicting the answer word from [Q; caption; EOS] with a throwaway head."""
    rng = np.random.default_rng([seed, 13])
    te = models.selector.text_encoder
    head = Linear(te.cfg.d_z, te.cfg.vocab_size, rng)
    n = models.lvlm.cfg.n_patches

    def loss_fn(step):
        seqs, tgt = [], []
        for i in rng.choice(len(data), size=cfg.batch_size, replace=False):
            s = data[i]
            k = int(rng.choice(cfg.subset_sizes))
            lost = np.setdiff1d(np.arange(n), rng.choice(n, size=k, replace=False))
            cap = target_caption(s, lost, guided=rng.random() < 0.6)
            seqs.append(te.pair_ids(s.question, cap))
            tgt.append(s.answer[0])
        logp = nx.log_softmax(head(te(seqs)), axis=-1)
        return nx.mul(nx.mean(nx.pick(logp, np.asarray(tgt))), -1.0)

    _train_loop(te.parameters() + head.parameters(), loss_fn, cfg.text_steps, cfg, log, "text",
                log_every)
    te.set_trainable(False)


def warm_up_lvlm(lvlm: ToyLVLM, data, eval_data, cfg: PretrainConfig, seed: int, log: list,
                 log_every: int = 0) -> tuple[float, int]:
    """Train until unpruned accuracy reaches ``cfg.floor``; returns (accuracy, extra rounds)."""
    if not data:
        raise WarmupError("empty pretraining dataset")
    pretrain_vision(lvlm, data, cfg, seed, log, log_every)
    pretrain_lvlm(lvlm, data, cfg, seed, log, steps=cfg.lvlm_steps, log_every=log_every,
                  mix=(1.0, 0.0, 0.0, 0.0))
    pretrain_lvlm(lvlm, data, cfg, seed + 500, log, log_every=log_every)
    acc = lvlm_accuracy(lvlm, eval_data)
    rounds = 0
    while acc < cfg.floor and rounds < cfg.max_rounds:
        rounds += 1
        pretrain_lvlm(lvlm, data, cfg, seed + 1000 * rounds, log,
                      steps=max(1, cfg.mix_steps // 2), log_every=log_every)
        acc = lvlm_accuracy(lvlm, eval_data)
    if acc < cfg.floor:
        raise WarmupError(f"unpruned LVLM accuracy {acc:.3f} below floor {cfg.floor} after "
                          f"{rounds} extra rounds; last losses {log[-3:]}")
    lvlm.set_trainable(False)
    return acc, rounds


def warm_up_compensators(models: Models, data, cfg: PretrainConfig, seed: int, log: list,
                         log_every: int = 0) -> None:
    """Caption model and selector text encoder, on top of a frozen LVLM encoder."""
    if not data:
        raise WarmupError("empty pretraining dataset")
    pretrain_captioner(models, data, cfg, seed, log, log_every)
    pretrain_text_encoder(models, data, cfg, seed, log, log_every)
    models.captioner.set_trainable(False)
    models.selector.set_trainable(False)


def pretrain_and_freeze(models: Models, data, eval_data, cfg: PretrainConfig | None = None,
                        seed: int = 0, log_every: int = 0, train_lvlm: bool = True) -> dict:
    """Warm up every frozen component, gate on unpruned LVLM accuracy, lock and checksum.

    With ``train_lvlm=False`` the LVLM is taken as already warmed (e.g. loaded
    from a checkpoint) and only its accuracy is measured.
    """
    cfg = cfg or PretrainConfig()
    log: list = []
    if train_lvlm:
        acc, rounds = warm_up_lvlm(models.lvlm, data, eval_data, cfg, seed, log, log_every)
    else:
        acc, rounds = lvlm_accuracy(models.lvlm, eval_data), 0
        models.lvlm.set_trainable(False)
    warm_up_compensators(models, data, cfg, seed, log, log_every)
    return {"lvlm_accuracy": acc, "extra_rounds": rounds, "log": log,
            "checksums": models.checksums(), "config": cfg.to_dict()}
