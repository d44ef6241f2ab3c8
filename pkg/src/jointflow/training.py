"""Two-stage trainer.

Stage 1 pretrains the shape VAE on whole shapes and then trains the assembly
branch (with the condition encoder) on its own. Stage 2 switches on the
generation branch and the zero-initialised adapters and optimises
``assembly_loss + lambda_gen * generation_loss`` while the image-drop rate
ramps linearly. Both stages write line-delimited JSON metrics and resumable
checkpoints.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .assembly import FragmentTokens, assembly_loss, build_tokens, pad_poses, pick_anchor
from .data.sample import AssemblySample, drop_parts, randomize_poses
from .errors import CutLocusError, DivergenceDetected
from .generation import generation_loss
from .manifold import TIME_EPS, PoseState, flow_targets, geodesic_interp, sample_uniform_rotation
from .model import JointModel, ModelConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

TRANSLATION_PRIOR = 0.5


@dataclass
class Stage1Config:
    vae_steps: int = 2000
    vae_batch_size: int = 16
    vae_lr: float = 1e-3
    vae_sdf_points: int = 1024
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    image_drop: float = 0.10
    missing_prob: float = 0.3


@dataclass
class Stage2Config:
    steps: int = 7500
    batch_size: int = 8
    lr: float = 1e-4
    lambda_gen: float = 1.0
    drop_start: float = 0.10
    drop_end: float = 0.50
    missing_prob: float = 0.3
    freeze_generation: bool = False
    freeze_vae: bool = True


@dataclass
class TrainConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    weight_decay: float = 0.01
    warmup_steps: int = 100
    grad_clip: float = 1.0
    divergence_patience: int = 50
    log_every: int = 10
    checkpoint_every: int = 500

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict(d.pop("model", {}))
        s1 = Stage1Config(**d.pop("stage1", {}))
        s2 = Stage2Config(**d.pop("stage2", {}))
        return cls(model=model, stage1=s1, stage2=s2, **d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, "rb") as f:
            return cls.from_dict(tomllib.load(f))


def lr_at(step: int, total: int, base: float, warmup: int) -> float:
    """Linear warm-up then cosine decay to zero."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step - warmup, span) / span))


def drop_rate_at(step: int, total: int, start: float = 0.10, end: float = 0.50) -> float:
    frac = 0.0 if total <= 0 else min(max(step / total, 0.0), 1.0)
    return start + (end - start) * frac


# -- batches ------------------------------------------------------------------
@dataclass
class AssemblyBatch:
    tokens: FragmentTokens
    rot_t: torch.Tensor
    trans_t: torch.Tensor
    rot_target: torch.Tensor
    trans_target: torch.Tensor
    weight: torch.Tensor
    t: torch.Tensor
    images: torch.Tensor
    drop: torch.Tensor
    indices: list
    samples: list


def prepare_fragments(sample: AssemblySample, rng: np.random.Generator, identity: bool = False):
    """Observed fragments scrambled and recentred; returns (local points, gt poses, areas)."""
    obs = sample.observed
    noised, gt = randomize_poses(sample, rng, identity=identity)
    local, rots, trans = [], [], []
    for i in obs:
        m = noised[i].mean(axis=0)
        local.append(noised[i] - m)
        rots.append(gt.rotation[i])
        trans.append(gt.translation[i] + gt.rotation[i] @ m)
    return local, PoseState(np.stack(rots), np.stack(trans)), sample.areas[obs]


def sample_noise_poses(n: int, rng: np.random.Generator) -> PoseState:
    return PoseState(sample_uniform_rotation(rng, n), TRANSLATION_PRIOR * rng.standard_normal((n, 3)))


def maybe_drop(sample: AssemblySample, prob: float, rng: np.random.Generator) -> AssemblySample:
    """Training-time missing-part augmentation: hide one part, never going below two."""
    if prob > 0 and rng.random() < prob and sample.num_parts > 2:
        return drop_parts(sample, 0.0, rng, count=1)
    return sample


def make_batch(samples: list[AssemblySample], rng: np.random.Generator, budget: int,
               image_drop: float = 0.0, missing_prob: float = 0.0, indices=None) -> AssemblyBatch:
    frags, areas, anchors, poses_t, targets_r, targets_a, weights, ts = [], [], [], [], [], [], [], []
    used = []
    for s in samples:
        s = maybe_drop(s, missing_prob, rng)
        used.append(s)
        local, gt, ar = prepare_fragments(s, rng)
        n = len(local)
        anchor = pick_anchor(ar)
        t = float(rng.uniform(0.0, 1.0 - 2 * TIME_EPS))
        while True:
            noise = sample_noise_poses(n, rng)
            try:
                pose_t = geodesic_interp(noise.rotation, gt.rotation, noise.translation, gt.translation, t)
                tgt = flow_targets(pose_t, gt, t)
                break
            except CutLocusError:  # antipodal draw: resample the noise
                continue
        rot_t, trans_t = pose_t.rotation.copy(), pose_t.translation.copy()
        rot_t[anchor], trans_t[anchor] = gt.rotation[anchor], gt.translation[anchor]
        w = np.ones(n)
        w[anchor] = 0.0
        frags.append(local)
        areas.append(ar)
        anchors.append(anchor)
        poses_t.append(PoseState(rot_t, trans_t))
        targets_r.append(tgt.rot_target * w[:, None])
        targets_a.append(tgt.trans_target * w[:, None])
        weights.append(w)
        ts.append(t)
    tokens = build_tokens(frags, areas, budget, anchors)
    n_max = tokens.max_fragments
    rot, trans = pad_poses(poses_t, n_max)
    tr = np.zeros((len(samples), n_max, 3))
    ta = np.zeros((len(samples), n_max, 3))
    wt = np.zeros((len(samples), n_max))
    for i in range(len(samples)):
        k = len(weights[i])
        tr[i, :k], ta[i, :k], wt[i, :k] = targets_r[i], targets_a[i], weights[i]
    images = torch.from_numpy(np.stack([s.silhouette for s in used]).astype(np.float32))
    drop = torch.from_numpy(rng.random(len(samples)) < image_drop)
    f32 = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32))  # noqa: E731
    return AssemblyBatch(tokens, f32(rot), f32(trans), f32(tr), f32(ta), f32(wt), f32(ts), images, drop,
                         list(indices) if indices is not None else list(range(len(samples))), used)


def assembly_batch_loss(model: JointModel, batch: AssemblyBatch, features=None, cond=None):
    if features is None:
        with torch.no_grad():
            features = model.fragment_features(batch.tokens)
    if cond is None:
        cond = model.encode_condition(batch.images, batch.drop)
    rv, tv = model.assemble(features, batch.tokens, batch.rot_t, batch.trans_t, batch.t, cond)
    return assembly_loss(rv, tv, batch.rot_target, batch.trans_target, batch.weight)


def joint_batch_loss(model: JointModel, batch: AssemblyBatch, z0, z1, lambda_gen: float = 1.0, features=None):
    if features is None:
        with torch.no_grad():
            features = model.fragment_features(batch.tokens)
    cond = model.encode_condition(batch.images, batch.drop)
    tt = batch.t[:, None, None]
    z_t = tt * z0 + (1.0 - tt) * z1
    rv, tv, vz = model.joint(features, batch.tokens, batch.rot_t, batch.trans_t, z_t, batch.t, cond)
    l_asm = assembly_loss(rv, tv, batch.rot_target, batch.trans_target, batch.weight)
    l_gen = generation_loss(vz, z0, z1)
    return l_asm + lambda_gen * l_gen, l_asm, l_gen


def whole_shape_inputs(samples: list[AssemblySample], n_tokens: int):
    pts = torch.from_numpy(np.stack([s.whole_points for s in samples]).astype(np.float32))
    qs = torch.from_numpy(np.stack([s.whole_queries[:n_tokens] for s in samples]).astype(np.float32))
    return pts, qs


def vae_batch(samples: list[AssemblySample], rng: np.random.Generator, n_tokens: int, n_sdf: int):
    pts, qs = whole_shape_inputs(samples, n_tokens)
    sel = [rng.choice(len(s.sdf_points), size=min(n_sdf, len(s.sdf_points)), replace=False) for s in samples]
    x = torch.from_numpy(np.stack([s.sdf_points[i] for s, i in zip(samples, sel)]).astype(np.float32))
    y = torch.from_numpy(np.stack([s.sdf_values[i] for s, i in zip(samples, sel)]).astype(np.float32))
    return pts, qs, x, y


# -- trainer ------------------------------------------------------------------
class Trainer:
    """Owns model, optimizer, RNG streams and the metrics log for one stage."""

    def __init__(self, config: TrainConfig, dataset, out_dir, model: JointModel | None = None,
                 metrics_path=None):
        self.config = config
        self.dataset = dataset
        self.out_dir = os.fspath(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        torch.manual_seed(config.seed)
        self.model = model if model is not None else JointModel(config.model)
        self.rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.metrics_path = metrics_path or os.path.join(self.out_dir, "metrics.jsonl")
        self.history: list[dict] = []
        self.stage = 1
        self.phase = "vae"
        self.step = 0
        self.optimizer = None
        self._bad_steps = 0
        self._z0_cache: dict[int, torch.Tensor] = {}

    # -- parameter groups -----------------------------------------------------
    def _phase_params(self):
        m, c2 = self.model, self.config.stage2
        if self.phase == "vae":
            mods = [m.vae]
        elif self.phase == "assembly":
            mods = [m.assembly, m.cond_encoder]
        else:
            mods = [m.assembly, m.cond_encoder, m.adapters]
            if not c2.freeze_generation:
                mods.append(m.generation)
            if not c2.freeze_vae:
                mods.append(m.vae)
        for p in m.parameters():
            p.requires_grad_(False)
        params = [p for mod in mods for p in mod.parameters()]
        for p in params:
            p.requires_grad_(True)
        return params

    def _phase_spec(self):
        c1, c2 = self.config.stage1, self.config.stage2
        return {
            "vae": (c1.vae_steps, c1.vae_lr),
            "assembly": (c1.steps, c1.lr),
            "joint": (c2.steps, c2.lr),
        }[self.phase]

    def _start_phase(self, phase: str, step: int = 0):
        self.phase = phase
        self.step = step
        params = self._phase_params()
        self.optimizer = torch.optim.AdamW(params, lr=self._phase_spec()[1], weight_decay=self.config.weight_decay)
        self._bad_steps = 0

    # -- logging / checkpoints ------------------------------------------------
    def _log(self, record: dict):
        self.history.append(record)
        with open(self.metrics_path, "a") as f:
            f.write(json.dumps(record) + "\n")

    def checkpoint_path(self, tag: str) -> str:
        return os.path.join(self.out_dir, f"{tag}.ckpt")

    def save(self, path=None) -> str:
        path = path or self.checkpoint_path(f"stage{self.stage}")
        extra = {"rng.torch": self.gen.get_state()}
        groups = []
        if self.optimizer is not None:
            sd = self.optimizer.state_dict()
            for pid, st in sd["state"].items():
                for k, v in st.items():
                    extra[f"optim.{pid}.{k}"] = torch.as_tensor(v)
            groups = [{k: v for k, v in g.items()} for g in sd["param_groups"]]
        meta = {
            "stage": self.stage,
            "phase": self.phase,
            "step": self.step,
            "train_config": self.config.to_dict(),
            "rng.numpy": self.rng.bit_generator.state,
            "optim.param_groups": groups,
        }
        self.model.save(path, meta=meta, extra=extra)
        return path

    def restore(self, path):
        model, meta, extra = JointModel.load(path)
        self.model = model
        self.stage = meta["stage"]
        self.rng.bit_generator.state = meta["rng.numpy"]
        self.gen.set_state(extra["rng.torch"])
        self._start_phase(meta["phase"], meta["step"])
        groups = meta.get("optim.param_groups") or []
        if groups:
            state: dict = {}
            for name, v in extra.items():
                if name.startswith("optim."):
                    _, pid, key = name.split(".", 2)
                    state.setdefault(int(pid), {})[key] = v
            self.optimizer.load_state_dict({"state": state, "param_groups": groups})
        return meta

    # -- one optimisation step ------------------------------------------------
    def _apply(self, loss, total: int, base_lr: float) -> bool:
        if not torch.isfinite(loss):
            self._bad_steps += 1
            self.optimizer.zero_grad(set_to_none=True)
            if self._bad_steps >= self.config.divergence_patience:
                raise DivergenceDetected(f"{self._bad_steps} consecutive non-finite losses at step {self.step}")
            return False
        self._bad_steps = 0
        lr = lr_at(self.step, total, base_lr, self.config.warmup_steps)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        params = [p for g in self.optimizer.param_groups for p in g["params"] if p.grad is not None]
        if self.config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip)
        self.optimizer.step()
        return True

    def _draw(self, batch_size: int) -> tuple[list, list]:
        idx = self.rng.integers(len(self.dataset), size=batch_size)
        return [int(i) for i in idx], [self.dataset[int(i)] for i in idx]

    def vae_step(self):
        c1 = self.config.stage1
        _, samples = self._draw(c1.vae_batch_size)
        pts, qs, x, y = vae_batch(samples, self.rng, self.config.model.generation.latent_tokens, c1.vae_sdf_points)
        loss, parts = self.model.vae.loss(pts, qs, x, y)
        ok = self._apply(loss, c1.vae_steps, c1.vae_lr)
        return {"loss": loss.item(), "sdf": parts["sdf"].item(), "kl": parts["kl"].item(), "applied": ok}

    def assembly_step(self):
        c1 = self.config.stage1
        idx, samples = self._draw(c1.batch_size)
        batch = make_batch(samples, self.rng, self.config.model.assembly.point_budget,
                           c1.image_drop, c1.missing_prob, idx)
        loss = assembly_batch_loss(self.model, batch)
        ok = self._apply(loss, c1.steps, c1.lr)
        value = loss.item()
        return {"loss": value, "asm": value, "drop_rate": c1.image_drop, "applied": ok}

    def shape_latents(self, indices, samples) -> torch.Tensor:
        missing = [(i, s) for i, s in zip(indices, samples) if i not in self._z0_cache]
        if missing:
            with torch.no_grad():
                pts, qs = whole_shape_inputs([s for _, s in missing], self.config.model.generation.latent_tokens)
                z = self.model.encode_shapes(pts, qs)
            for (i, _), zi in zip(missing, z):
                self._z0_cache[i] = zi
        return torch.stack([self._z0_cache[i] for i in indices])

    def joint_step(self):
        c2 = self.config.stage2
        rate = drop_rate_at(self.step, c2.steps, c2.drop_start, c2.drop_end)
        idx, samples = self._draw(c2.batch_size)
        batch = make_batch(samples, self.rng, self.config.model.assembly.point_budget, rate, c2.missing_prob, idx)
        z0 = self.shape_latents(idx, samples)
        z1 = torch.randn(z0.shape, generator=self.gen)
        loss, l_asm, l_gen = joint_batch_loss(self.model, batch, z0, z1, c2.lambda_gen)
        ok = self._apply(loss, c2.steps, c2.lr)
        return {"loss": loss.item(), "asm": l_asm.item(), "gen": l_gen.item(), "drop_rate": rate, "applied": ok}

    def _run_phase(self, total: int, step_fn, on_step=None):
        self.model.train()
        while self.step < total:
            rec = step_fn()
            rec = {"stage": self.stage, "phase": self.phase, "step": self.step, **rec}
            self.step += 1
            if self.step % self.config.log_every == 0 or self.step == total:
                self._log(rec)
            if on_step is not None:
                on_step(self, rec)
            if self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0:
                self.save()

    # -- stages ---------------------------------------------------------------
    def calibrate_latent_scale(self, max_samples: int = 256):
        n = min(len(self.dataset), max_samples)
        samples = [self.dataset[i] for i in range(n)]
        with torch.no_grad():
            zs = []
            for i in range(0, n, 32):
                pts, qs = whole_shape_inputs(samples[i:i + 32], self.config.model.generation.latent_tokens)
                zs.append(self.model.vae.encode(pts, qs).mean)
            std = torch.cat(zs).std()
        self.model.vae.latent_scale.fill_(float(std) if std > 0 else 1.0)

    def train_stage1(self, on_step=None) -> str:
        c1 = self.config.stage1
        self.stage = 1
        if self.optimizer is None:
            self._start_phase("vae")
        if self.phase == "vae":
            self._run_phase(c1.vae_steps, self.vae_step, on_step)
            self.calibrate_latent_scale()
            self._start_phase("assembly")
        self._run_phase(c1.steps, self.assembly_step, on_step)
        return self.save(self.checkpoint_path("stage1"))

    def train_stage2(self, on_step=None) -> str:
        if self.stage != 2 or self.optimizer is None:
            self.stage = 2
            self._start_phase("joint")
        self._run_phase(self.config.stage2.steps, self.joint_step, on_step)
        return self.save(self.checkpoint_path("stage2"))


def train_stage1(config: TrainConfig, dataset, out_dir, resume=None, on_step=None) -> str:
    trainer = Trainer(config, dataset, out_dir)
    if resume:
        trainer.restore(resume)
    return trainer.train_stage1(on_step)


def train_stage2(config: TrainConfig, stage1_checkpoint, dataset, out_dir, resume=None, on_step=None) -> str:
    trainer = Trainer(config, dataset, out_dir)
    if resume:
        trainer.restore(resume)
    else:
        model, meta, _ = JointModel.load(stage1_checkpoint)
        if meta.get("stage") != 1:
            raise ValueError(f"{stage1_checkpoint} is not a stage-1 checkpoint")
        trainer.model = model
    return trainer.train_stage2(on_step)
