"""Training loops for both stages and the inference wrapper.

Every random draw inside a step is derived from ``(seed, stream, step)`` so a
run resumed from a checkpoint reproduces the remaining steps exactly.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from tpg import CheckpointError, StateError
from tpg.alignment import (
    AlignmentBatch,
    AlignmentWeights,
    ClsConfig,
    draw_step_noise,
    loss_sldm_total,
    reference_indices,
)
from tpg.checkpoint import load_checkpoint, save_checkpoint
from tpg.codec import encode, latent_shape, resize_mask
from tpg.config import RunConfig
from tpg.data import load_dataset
from tpg.diffusion import ConditioningBundle, DenoiserNet, NoiseSchedule, SamplerConfig, sample
from tpg.ldn import LatentDisentangledNetwork, augment_view, loss_scm

# Random stream identifiers.
_SCM_PERM, _SCM_AUG, _RAM_PERM, _SLDM_BATCH, _SLDM_NOISE, _INIT, _SAMPLE = range(7)


def step_rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def step_generator(*keys: int) -> torch.Generator:
    seed = int(step_rng(*keys).integers(0, 2**63 - 1))
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------------------
# data


@dataclass
class DatasetArrays:
    clothing: torch.Tensor  # (N, H, W, 3)
    pattern: torch.Tensor  # (N, H, W, 3); zeros for unlabeled rows
    mask: torch.Tensor  # (N, H, W)
    labeled: torch.Tensor  # (N,) bool
    sample_ids: list[str]

    def __len__(self) -> int:
        return len(self.sample_ids)

    @classmethod
    def from_manifest(cls, path: str | Path) -> "DatasetArrays":
        cl, pa, ma, lab, ids = [], [], [], [], []
        for s in load_dataset(path):
            cl.append(s.clothing)
            pa.append(s.pattern if s.labeled else np.zeros_like(s.clothing))
            ma.append(s.mask)
            lab.append(s.labeled)
            ids.append(s.sample_id)
        if not ids:
            return cls(torch.zeros(0, 1, 1, 3), torch.zeros(0, 1, 1, 3), torch.zeros(0, 1, 1),
                       torch.zeros(0, dtype=torch.bool), [])
        return cls(
            torch.from_numpy(np.stack(cl)),
            torch.from_numpy(np.stack(pa)),
            torch.from_numpy(np.stack(ma).astype(np.float32)),
            torch.tensor(lab, dtype=torch.bool),
            ids,
        )

    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labeled.numpy())

    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.labeled.numpy())


class JsonlLog:
    def __init__(self, path: Path, append: bool = False):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.f = open(path, "a" if append else "w")
        self.t0 = time.perf_counter()

    def write(self, record: dict) -> None:
        record = {**record, "wall_time": round(time.perf_counter() - self.t0, 4)}
        self.f.write(json.dumps(record, sort_keys=True) + "\n")
        self.f.flush()

    def close(self) -> None:
        self.f.close()


def _floats(d: dict) -> dict:
    return {k: float(v) for k, v in d.items()}


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


# ---------------------------------------------------------------------------
# stage I


def build_ldn(run: RunConfig) -> LatentDisentangledNetwork:
    torch.manual_seed(run.seed)
    c = latent_shape(run.data.image_size, run.sldm.codec_factor)[0]
    return LatentDisentangledNetwork(c, run.ldn)


@torch.no_grad()
def feature_distances(ldn: LatentDisentangledNetwork, z_c: torch.Tensor, z_p: torch.Tensor,
                      chunk: int = 100) -> dict[str, float]:
    """Centroid distances between clothing-side and pattern-side features."""
    f_a, f_tc, f_tp = [], [], []
    for i in range(0, len(z_c), chunk):
        _, tc, ac = ldn.features(z_c[i:i + chunk])
        _, tp, _ = ldn.features(z_p[i:i + chunk])
        f_a.append(ac)
        f_tc.append(tc)
        f_tp.append(tp)
    f_a, f_tc, f_tp = torch.cat(f_a), torch.cat(f_tc), torch.cat(f_tp)
    return {
        "structured_to_pattern": float((f_a.mean(0) - f_tp.mean(0)).norm()),
        "defect_to_pattern": float((f_tc.mean(0) - f_tp.mean(0)).norm()),
    }


def ldn_sidecar(run: RunConfig, step: int, phase: str) -> dict:
    return {
        "stage": "ldn",
        "d": run.ldn.d,
        "N_ram": run.ldn.n_ram,
        "K_sat": run.ldn.k_sat,
        "alpha": run.ldn.alpha,
        "use_sat": run.ldn.use_sat,
        "seed": run.seed,
        "step": step,
        "phase": phase,
        "config_hash": run.stage_hash("ldn"),
        "config": run.to_dict(),
    }


def load_ldn(path: str | Path, run: RunConfig | None = None) -> tuple[LatentDisentangledNetwork, dict]:
    """Load a stage-I checkpoint; the result is frozen."""
    state, meta = load_checkpoint(path, "ldn")
    saved = RunConfig.from_dict(meta["config"])
    if run is not None and run.stage_hash("ldn") != meta["config_hash"]:
        # Architecture must match; training-only differences are tolerated.
        keys = ("d", "n_ram", "k_sat", "d_head", "use_sat")
        if any(getattr(run.ldn, k) != getattr(saved.ldn, k) for k in keys):
            raise CheckpointError(f"{path} was trained with a different LDN architecture")
    ldn = build_ldn(saved)
    ldn.load_state_dict(state["model"])
    return ldn.freeze(), meta


def train_ldn(run: RunConfig, data: DatasetArrays, out_dir: str | Path,
              resume: str | Path | None = None, max_steps: int | None = None) -> Path:
    """Stage I: SCM alone, then RAM+SATs against the frozen SCM.

    Writes ``ldn_log.jsonl``, periodic checkpoints under ``checkpoints/`` and
    the final ``ldn.pt``. ``max_steps`` stops early (used to test resuming).
    """
    cfg = run.ldn
    out = Path(out_dir)
    lab = data.labeled_indices()
    if lab.size == 0:
        raise StateError("stage I needs labeled pairs")
    r = run.sldm.codec_factor
    z_c_all = encode(data.clothing[lab], r)
    z_p_all = encode(data.pattern[lab], r)
    bs = min(cfg.batch_size, lab.size)
    spe = math.ceil(lab.size / bs)
    n_scm, n_ram = cfg.epochs_scm * spe, cfg.epochs_ram * spe
    total = n_scm + n_ram

    ldn = build_ldn(run)
    opt_scm = torch.optim.Adam(ldn.scm.parameters(), lr=cfg.lr_scm)
    opt_ram = torch.optim.Adam([
        {"params": ldn.ram.parameters(), "lr": cfg.lr_ram},
        {"params": ldn.sat.parameters(), "lr": cfg.lr_sat},
    ])
    start = 0
    if resume is not None:
        state, meta = load_checkpoint(resume, "ldn")
        if meta["config_hash"] != run.stage_hash("ldn"):
            raise CheckpointError("resume checkpoint was written with a different configuration")
        ldn.load_state_dict(state["model"])
        opt_scm.load_state_dict(state["opt_scm"])
        opt_ram.load_state_dict(state["opt_ram"])
        start = meta["step"]
    log = JsonlLog(out / "ldn_log.jsonl", append=resume is not None)
    n_probe = min(cfg.analysis_samples, lab.size)

    def save(path, step):
        phase = "scm" if step < n_scm else "ram_sat"
        state = {"model": ldn.state_dict(), "opt_scm": opt_scm.state_dict(),
                 "opt_ram": opt_ram.state_dict()}
        return save_checkpoint(path, state, ldn_sidecar(run, step, phase))

    def probe(step):
        ldn.eval()
        d = feature_distances(ldn, z_c_all[:n_probe], z_p_all[:n_probe])
        log.write({"step": step, "phase": "ram_sat", "distances": d})

    stop = total if max_steps is None else min(total, max_steps)
    for step in range(start, stop):
        if step < n_scm:
            ldn.scm.train()
            epoch, k = divmod(step, spe)
            idx = lab[step_rng(run.seed, _SCM_PERM, epoch).permutation(lab.size)[k * bs:(k + 1) * bs]]
            seeds = step_rng(run.seed, _SCM_AUG, step).integers(0, 2**31 - 1, size=(len(idx), 2))
            view_c = torch.stack([augment_view(data.clothing[i], int(s)) for i, s in zip(idx, seeds[:, 0])])
            view_p = torch.stack([augment_view(data.pattern[i], int(s)) for i, s in zip(idx, seeds[:, 1])])
            loss = loss_scm(ldn.scm, encode(view_c, r), encode(view_p, r))
            opt_scm.zero_grad(set_to_none=True)
            loss.backward()
            opt_scm.step()
            log.write({"step": step, "phase": "scm", "losses": {"scm": loss.item()}})
        else:
            k_ram = step - n_scm
            ldn.scm.eval()
            for p in ldn.scm.parameters():
                p.requires_grad_(False)
            if k_ram == 0:
                probe(step)
            ldn.ram.train()
            ldn.sat.train()
            for g, base in zip(opt_ram.param_groups, (cfg.lr_ram, cfg.lr_sat)):
                g["lr"] = cosine_lr(base, k_ram, n_ram)
            epoch, k = divmod(k_ram, spe)
            perm = step_rng(run.seed, _RAM_PERM, epoch).permutation(lab.size)[k * bs:(k + 1) * bs]
            loss = ldn.ram_sat_loss(z_c_all[perm], z_p_all[perm])
            opt_ram.zero_grad(set_to_none=True)
            loss.backward()
            opt_ram.step()
            log.write({"step": step, "phase": "ram_sat", "losses": {"triplet": loss.item()}})
            if (k_ram + 1) % cfg.analysis_every == 0 or step + 1 == total:
                probe(step + 1)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save(out / "checkpoints" / f"ldn_step{step + 1:06d}.pt", step + 1)
    log.close()
    if stop < total:
        return save(out / "checkpoints" / f"ldn_step{stop:06d}.pt", stop)
    return save(out / "ldn.pt", total)


# ---------------------------------------------------------------------------
# stage II


@dataclass
class FeatureBank:
    """Frozen stage-I outputs for every sample of a dataset."""

    z_c: torch.Tensor
    z_p: torch.Tensor
    mask: torch.Tensor  # latent resolution
    content: torch.Tensor  # (N, L, d)
    pooled: torch.Tensor  # (N, d)
    defect: torch.Tensor  # (N, L, c)
    structured: torch.Tensor  # (N, L, c)

    @classmethod
    @torch.no_grad()
    def build(cls, ldn: LatentDisentangledNetwork, clothing, pattern, mask, r: int,
              chunk: int = 100) -> "FeatureBank":
        z_c, z_p = encode(clothing, r), encode(pattern, r)
        parts = {k: [] for k in ("content", "pooled", "defect", "structured")}
        for i in range(0, len(z_c), chunk):
            f_s, f_t, f_a = ldn.features(z_c[i:i + chunk])
            parts["content"].append(f_s.token_map)
            parts["pooled"].append(f_s.pooled)
            parts["defect"].append(f_t.flatten(2).transpose(1, 2))
            parts["structured"].append(f_a.flatten(2).transpose(1, 2))
        cat = {k: torch.cat(v) if v else torch.zeros(0) for k, v in parts.items()}
        return cls(z_c, z_p, resize_mask(mask, r), **cat)

    def bundle(self, idx, ablate: list[str]) -> ConditioningBundle:
        idx = torch.as_tensor(idx)
        off = set()
        if "no_ldn" in ablate:
            off |= {"content", "structure", "defect"}
        for s in ("content", "structure", "defect"):
            if f"no_{s}" in ablate:
                off.add(s)
        return ConditioningBundle(
            content_tokens=None if "content" in off else self.content[idx],
            structure_tokens=None if "structure" in off else self.structured[idx],
            defect_tokens=None if "defect" in off else self.defect[idx],
            global_vec=self.pooled[idx],
        )


def build_denoiser(run: RunConfig) -> DenoiserNet:
    s = run.sldm
    c, h, w = latent_shape(run.data.image_size, s.codec_factor)
    torch.manual_seed(int(step_rng(run.seed, _INIT).integers(0, 2**31 - 1)))
    return DenoiserNet(latent_channels=c, content_dim=run.ldn.d, n_tokens=h * w, latent_hw=(h, w),
                       widths=s.widths, ctx_dim=s.ctx_dim, time_dim=s.time_dim, heads=s.heads,
                       alpha_bar=NoiseSchedule(s.T, s.beta_start, s.beta_end).alpha_bar)


def alignment_weights(run: RunConfig) -> AlignmentWeights | None:
    if run.has("no_alignment"):
        return None
    s = run.sldm
    return AlignmentWeights(
        std=0.0 if run.has("no_std") else s.lambda_std,
        cls=0.0 if run.has("no_cls") else s.lambda_cls,
        perceptual=s.lambda_perceptual,
        mse=s.lambda_mse,
        unlabeled_consistency=s.unlabeled_consistency,
    )


def sldm_sidecar(run: RunConfig, step: int, ldn_meta: dict) -> dict:
    return {
        "stage": "sldm",
        "T": run.sldm.T,
        "beta_start": run.sldm.beta_start,
        "beta_end": run.sldm.beta_end,
        "guidance_scale_default": run.sampler.guidance,
        "ablate": list(run.ablate),
        "seed": run.seed,
        "step": step,
        "config_hash": run.stage_hash("sldm"),
        "ldn_config_hash": ldn_meta["config_hash"],
        "config": run.to_dict(),
    }


def select_batch(run: RunConfig, lab: np.ndarray, unl: np.ndarray, step: int) -> np.ndarray:
    """Labeled rows first, then unlabeled; falls back to labeled rows if none are unlabeled."""
    s = run.sldm
    rng = step_rng(run.seed, _SLDM_BATCH, step)
    bs = s.batch_size
    n_lab = max(1, min(lab.size, int(round(bs * s.labeled_fraction))))
    n_unl = min(bs - n_lab, unl.size)
    pick_l = rng.choice(lab, size=n_lab, replace=False)
    pick_u = rng.choice(unl, size=n_unl, replace=False) if n_unl else np.zeros(0, dtype=np.int64)
    return np.concatenate([pick_l, pick_u]).astype(np.int64)


def train_sldm(run: RunConfig, data: DatasetArrays, ldn: LatentDisentangledNetwork, ldn_meta: dict,
               out_dir: str | Path, resume: str | Path | None = None,
               max_steps: int | None = None) -> Path:
    """Stage II: denoiser trained on mixed batches with the frozen LDN features."""
    if not getattr(ldn, "frozen", False):
        raise StateError("stage II needs a frozen stage-I network")
    s = run.sldm
    out = Path(out_dir)
    r = s.codec_factor
    lab, unl = data.labeled_indices(), data.unlabeled_indices()
    if lab.size == 0:
        raise StateError("stage II needs labeled pairs")
    bank = FeatureBank.build(ldn, data.clothing, data.pattern, data.mask, r)
    schedule = NoiseSchedule(s.T, s.beta_start, s.beta_end)
    weights = alignment_weights(run)
    cls_cfg = ClsConfig.for_image(run.data.image_size)
    lshape = tuple(bank.z_c.shape[1:])

    model = build_denoiser(run)
    ema = copy.deepcopy(model).requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=s.lr)
    start = 0
    if resume is not None:
        state, meta = load_checkpoint(resume, "sldm")
        if meta["config_hash"] != run.stage_hash("sldm"):
            raise CheckpointError("resume checkpoint was written with a different configuration")
        model.load_state_dict(state["model"])
        ema.load_state_dict(state["ema"])
        opt.load_state_dict(state["opt"])
        start = meta["step"]
    log = JsonlLog(out / "sldm_log.jsonl", append=resume is not None)

    def save(path, step):
        state = {"model": model.state_dict(), "ema": ema.state_dict(), "opt": opt.state_dict()}
        return save_checkpoint(path, state, sldm_sidecar(run, step, ldn_meta))

    stop = s.steps if max_steps is None else min(s.steps, max_steps)
    for step in range(start, stop):
        model.train()
        if s.lr_cosine:
            for g in opt.param_groups:
                g["lr"] = cosine_lr(s.lr, step, s.steps)
        idx = select_batch(run, lab, unl, step)
        it = torch.from_numpy(idx)
        batch = AlignmentBatch(data.clothing[it], data.pattern[it], data.mask[it], data.labeled[it])
        batch.ref_index = reference_indices(batch.labeled, step_rng(run.seed, _SLDM_BATCH, step, 1))
        gen = step_generator(run.seed, _SLDM_NOISE, step)
        noise = draw_step_noise(len(idx), lshape, schedule, s.align_t_max, s.p_drop, gen)
        latents = {"z_c": bank.z_c[it], "z_p": bank.z_p[it], "mask": bank.mask[it]}
        res = loss_sldm_total(model, ldn, schedule, batch, latents, bank.bundle(it, run.ablate),
                              noise, weights, cls_cfg, r)
        opt.zero_grad(set_to_none=True)
        res["total"].backward()
        if s.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), s.grad_clip)
        opt.step()
        with torch.no_grad():
            for pe, pm in zip(ema.parameters(), model.parameters()):
                pe.lerp_(pm, 1.0 - s.ema_decay)
        keys = ("dp", "std", "cls", "perceptual", "mse", "ap", "total")
        log.write({"step": step, "losses": _floats({k: res[k].detach() for k in keys})})
        if s.checkpoint_every and (step + 1) % s.checkpoint_every == 0 and step + 1 < s.steps:
            save(out / "checkpoints" / f"sldm_step{step + 1:06d}.pt", step + 1)
    log.close()
    if stop < s.steps:
        return save(out / "checkpoints" / f"sldm_step{stop:06d}.pt", stop)
    return save(out / "sldm.pt", s.steps)


# ---------------------------------------------------------------------------
# inference


class PatternGenerator:
    """Frozen LDN + denoiser; maps clothing images to generated patterns."""

    def __init__(self, run: RunConfig, ldn: LatentDisentangledNetwork, model: DenoiserNet):
        self.run = run
        self.ldn = ldn
        self.model = model.eval().requires_grad_(False)
        s = run.sldm
        self.schedule = NoiseSchedule(s.T, s.beta_start, s.beta_end)

    @classmethod
    def from_checkpoints(cls, ldn_path, sldm_path, run: RunConfig | None = None) -> "PatternGenerator":
        state, meta = load_checkpoint(sldm_path, "sldm")
        saved = RunConfig.from_dict(meta["config"])
        ldn, ldn_meta = load_ldn(ldn_path)
        if ldn_meta["config_hash"] != meta["ldn_config_hash"]:
            raise CheckpointError("stage-II checkpoint was trained on a different stage-I checkpoint")
        if run is not None:
            saved.sampler = run.sampler
        model = build_denoiser(saved)
        model.load_state_dict(state["ema"] if saved.sldm.ema_decay > 0 else state["model"])
        return cls(saved, ldn, model)

    def initial_noise(self, n: int, seeds: list[int]) -> torch.Tensor:
        c, h, w = latent_shape(self.run.data.image_size, self.run.sldm.codec_factor)
        out = [torch.randn((c, h, w), generator=step_generator(self.run.seed, _SAMPLE, sd))
               for sd in seeds[:n]]
        return torch.stack(out)

    @torch.no_grad()
    def generate(self, clothing: torch.Tensor, mask: torch.Tensor, seeds: list[int],
                 sampler: SamplerConfig | None = None) -> torch.Tensor:
        """``(B, H, W, 3)`` clothing + ``(B, H, W)`` masks -> ``(B, H, W, 3)`` patterns.

        Each row uses its own seed so results do not depend on batch grouping.
        """
        sampler = sampler or self.run.sampler
        r = self.run.sldm.codec_factor
        bank = FeatureBank.build(self.ldn, clothing, clothing, mask, r)
        bundle = bank.bundle(torch.arange(len(clothing)), self.run.ablate)
        z0 = self.initial_noise(len(clothing), [int(s) for s in seeds])
        return sample(self.model, bank.z_c, bank.mask, bundle.positive(), bundle.negative(),
                      sampler, self.schedule, r, z_init=z0)
