"""Joint inference: Euler integration of poses on SO(3) x R^3 and latents in R^{n x c}."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .assembly import build_tokens, pad_poses, pick_anchor
from .data.sample import AssemblySample
from .errors import EmptyInput, EmptySurface, NonFiniteState
from .generation import cfg_combine
from .manifold import FlowTarget, PoseState, euler_step_pose, flow_targets, sample_uniform_rotation
from .training import TRANSLATION_PRIOR, prepare_fragments

log = logging.getLogger(__name__)

DEFAULT_STEPS = 50
DEFAULT_GUIDANCE = 3.0


@dataclass
class Problem:
    """One assembly query: fragments in their own (recentred) frames plus the anchor's known pose."""

    fragments: list
    areas: np.ndarray
    anchor: int
    anchor_pose: PoseState
    image: np.ndarray | None = None
    gt: PoseState | None = None
    z0: torch.Tensor | None = None

    @property
    def num_parts(self) -> int:
        return len(self.fragments)


def problem_from_sample(sample: AssemblySample, rng: np.random.Generator, identity: bool = False) -> Problem:
    local, gt, areas = prepare_fragments(sample, rng, identity=identity)
    anchor = pick_anchor(areas)
    return Problem(local, areas, anchor, gt[anchor], sample.silhouette, gt)


@dataclass
class SampleResult:
    poses: list
    latents: torch.Tensor | None
    meshes: list | None = None


class ModelField:
    """Velocity field backed by a trained model.

    ``mode="joint"`` runs both branches with adapters; ``mode="assembly"``
    runs the assembly branch alone (stage-1 checkpoints). Classifier-free
    guidance only touches the latent velocity; pose velocities come from the
    conditional pass.
    """

    def __init__(self, model, problems: list[Problem], guidance: float = DEFAULT_GUIDANCE,
                 use_condition: bool = True, mode: str = "joint"):
        self.model = model.eval()
        self.mode = mode
        self.guidance = guidance
        budget = model.config.assembly.point_budget
        self.tokens = build_tokens([p.fragments for p in problems], [p.areas for p in problems], budget,
                                   [p.anchor for p in problems])
        b = len(problems)
        with torch.no_grad():
            self.features = model.fragment_features(self.tokens)
            self.null = model.cond_encoder.null(b)
            self.use_condition = use_condition and all(p.image is not None for p in problems)
            if self.use_condition:
                images = torch.from_numpy(np.stack([p.image for p in problems]).astype(np.float32))
                self.cond = model.encode_condition(images)
            else:
                self.cond = self.null
        cfg = model.config
        self.latent_shape = None if mode == "assembly" else (b, cfg.generation.latent_tokens, cfg.vae.latent_dim)

    @torch.no_grad()
    def __call__(self, rot, trans, z, t_asm: float, t_gen: float | None = None):
        b = rot.shape[0]
        r = torch.from_numpy(rot.astype(np.float32))
        a = torch.from_numpy(trans.astype(np.float32))
        ta = torch.full((b,), float(t_asm))
        if self.mode == "assembly":
            rv, tv = self.model.assemble(self.features, self.tokens, r, a, ta, self.cond)
            return rv.double().numpy(), tv.double().numpy(), None
        tg = ta if t_gen is None else torch.full((b,), float(t_gen))
        rv, tv, vz = self.model.joint(self.features, self.tokens, r, a, z, ta, self.cond, tg)
        if self.use_condition and self.guidance > 0:
            _, _, vu = self.model.joint(self.features, self.tokens, r, a, z, ta, self.null, tg)
            vz = cfg_combine(vz, vu, self.guidance)
        return rv.double().numpy(), tv.double().numpy(), vz


class OracleField:
    """Ground-truth conditional velocities, for testing the integrator in isolation."""

    def __init__(self, problems: list[Problem], latent_shape=None):
        self.gt_rot, self.gt_trans = pad_poses([p.gt for p in problems], max(p.num_parts for p in problems))
        self.z0 = None
        if problems and problems[0].z0 is not None:
            self.z0 = torch.stack([p.z0 for p in problems]).double()
        self.latent_shape = None if self.z0 is None else tuple(self.z0.shape)

    def __call__(self, rot, trans, z, t_asm: float, t_gen: float | None = None):
        tgt = flow_targets(PoseState(rot, trans), PoseState(self.gt_rot, self.gt_trans), t_asm)
        vz = None
        if z is not None:
            tg = t_asm if t_gen is None else t_gen
            vz = (self.z0 - z) / (1.0 - tg)
        return tgt.rot_target, tgt.trans_target, vz


def initial_state(problems: list[Problem], rng: np.random.Generator):
    """Noise poses for every fragment, with each anchor placed at its known pose."""
    poses = []
    for p in problems:
        n = p.num_parts
        rot = sample_uniform_rotation(rng, n)
        trans = TRANSLATION_PRIOR * rng.standard_normal((n, 3))
        rot[p.anchor] = p.anchor_pose.rotation
        trans[p.anchor] = p.anchor_pose.translation
        poses.append(PoseState(rot, trans))
    n_max = max(p.num_parts for p in problems)
    rot, trans = pad_poses(poses, n_max)
    frozen = np.ones((len(problems), n_max), dtype=bool)
    for i, p in enumerate(problems):
        frozen[i, : p.num_parts] = False
        frozen[i, p.anchor] = True
    return rot, trans, frozen


def _check(name, arr, k, t):
    data = arr.numpy() if isinstance(arr, torch.Tensor) else arr
    if not np.all(np.isfinite(data)):
        bad = int(np.size(data) - np.isfinite(data).sum())
        raise NonFiniteState(f"{name} has {bad} non-finite entries at step {k} (t={t:.4f})")


def integrate(field, problems: list[Problem], steps: int, rng: np.random.Generator,
              generator: torch.Generator | None = None, gen_steps: int | None = None):
    """Euler-integrate poses (and latents when the field has them) from t=0 to t=1.

    Both branches share the time grid ``k / steps`` unless ``gen_steps``
    differs; then the coarser branch is advanced only at its own grid points
    and, between them, is paired with the finer branch at its latest grid time.
    """
    if steps < 1 or (gen_steps is not None and gen_steps < 1):
        raise ValueError("steps must be >= 1")
    if not problems:
        raise EmptyInput("no problems to sample")
    rot, trans, frozen = initial_state(problems, rng)
    z = None
    if getattr(field, "latent_shape", None) is not None:
        z = torch.randn(field.latent_shape, generator=generator, dtype=torch.float64 if isinstance(field, OracleField)
                        else torch.float32)
    sa, sg = steps, gen_steps or steps
    total = max(sa, sg)
    if total % sa or total % sg:
        raise ValueError("step counts must divide one another")
    za = total // sa
    zg = total // sg
    t_a = t_g = 0.0
    for k in range(total):
        rv, tv, vz = field(rot, trans, z, t_a, t_g)
        _check("rotation velocity", rv, k, t_a)
        _check("translation velocity", tv, k, t_a)
        if k % za == 0:
            rv = np.where(frozen[..., None], 0.0, rv)
            tv = np.where(frozen[..., None], 0.0, tv)
            nxt = euler_step_pose(PoseState(rot, trans), FlowTarget(rv, tv), 1.0 / sa)
            rot, trans = nxt.rotation, nxt.translation
        if z is not None and k % zg == 0:
            _check("latent velocity", vz, k, t_g)
            z = z + vz * (1.0 / sg)
        t_a = ((k + 1) // za) / sa
        t_g = ((k + 1) // zg) / sg
        _check("poses", rot, k, t_a)
    poses = [PoseState(rot[i, : p.num_parts], trans[i, : p.num_parts]) for i, p in enumerate(problems)]
    return poses, z


def decode_meshes(model, latents: torch.Tensor, grid_resolution: int = 64):
    meshes = []
    with torch.no_grad():
        for z in latents:
            try:
                meshes.append(model.decode_mesh(z.float(), grid_resolution))
            except EmptySurface:
                log.warning("decoded latent has no surface")
                meshes.append(None)
    return meshes


def joint_sample(model, problems: list[Problem], steps: int = DEFAULT_STEPS, guidance: float = DEFAULT_GUIDANCE,
                 rng: np.random.Generator | None = None, seed: int = 0, decode: bool = True,
                 grid_resolution: int = 64, use_condition: bool = True, gen_steps: int | None = None,
                 mode: str = "joint") -> SampleResult:
    rng = rng if rng is not None else np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(int(rng.integers(2**31)))
    field = ModelField(model, problems, guidance, use_condition=use_condition, mode=mode)
    poses, z = integrate(field, problems, steps, rng, generator, gen_steps)
    meshes = decode_meshes(model, z, grid_resolution) if decode and z is not None else None
    return SampleResult(poses, z, meshes)


def assemble_only(model, problems: list[Problem], steps: int = DEFAULT_STEPS, rng=None, seed: int = 0):
    """Poses only, with the image condition nulled (generation branch still runs)."""
    return joint_sample(model, problems, steps, 0.0, rng, seed, decode=False, use_condition=False).poses
