"""Assembly branch: per-fragment rotation/translation velocities on SO(3) x R^3."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import EmptyInput, ShapeMismatch
from .layers import FourierEmbedder, SkipStack, TimeEmbedding, gather_groups, masked_mean
from .manifold import PoseState
from .vae import allocate_points, fragment_inputs, pad_sets


@dataclass
class AssemblyConfig:
    width: int = 64
    heads: int = 4
    depth: int = 6
    point_budget: int = 1024
    num_frequencies: int = 6

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FragmentTokens:
    """Padded token layout for a batch of ``B`` samples with up to ``N`` fragments each.

    Fragment encoder inputs are stacked over all ``F`` fragments of the batch;
    ``tok_frag``/``tok_slot`` gather each sample's tokens out of the per-fragment
    embeddings, and ``tok_fid`` names the fragment (within its sample) that a
    token belongs to.
    """

    points: torch.Tensor  # (F, Mmax, 3)
    point_mask: torch.Tensor
    queries: torch.Tensor  # (F, Qmax, 3)
    query_mask: torch.Tensor
    tok_frag: torch.Tensor  # (B, T)
    tok_slot: torch.Tensor
    tok_fid: torch.Tensor
    tok_mask: torch.Tensor
    frag_mask: torch.Tensor  # (B, N)
    anchor: torch.Tensor  # (B, N) bool
    counts: list

    @property
    def batch_size(self) -> int:
        return self.frag_mask.shape[0]

    @property
    def max_fragments(self) -> int:
        return self.frag_mask.shape[1]

    def token_positions(self) -> torch.Tensor:
        return self.queries[self.tok_frag, self.tok_slot]

    def gather_tokens(self, per_fragment: torch.Tensor) -> torch.Tensor:
        """``(F, Qmax, d)`` per-fragment embeddings -> ``(B, T, d)`` token rows."""
        return per_fragment[self.tok_frag, self.tok_slot]


def pick_anchor(areas) -> int:
    """Largest-area fragment; its pose is held at ground truth to fix the global gauge."""
    return int(np.argmax(np.asarray(areas)))


def build_tokens(fragments: list[list[np.ndarray]], areas: list, budget: int = 1024,
                 anchors: list[int] | None = None) -> FragmentTokens:
    """Lay out fragment point sets (each in farthest-point order) for the assembly branch."""
    if any(len(f) == 0 for f in fragments):
        raise EmptyInput("every sample needs at least one fragment")
    keys, queries = [], []
    tok_frag, tok_slot, tok_fid = [], [], []
    counts = [len(f) for f in fragments]
    for frags, frag_areas in zip(fragments, areas):
        alloc = allocate_points(frag_areas, budget)
        tf, ts, tid = [], [], []
        for j, (pts, m) in enumerate(zip(frags, alloc)):
            k, q = fragment_inputs(pts, int(m))
            tf.append(np.full(len(q), len(keys)))
            ts.append(np.arange(len(q)))
            tid.append(np.full(len(q), j))
            keys.append(k)
            queries.append(q)
        tok_frag.append(np.concatenate(tf))
        tok_slot.append(np.concatenate(ts))
        tok_fid.append(np.concatenate(tid))
    points, point_mask = pad_sets(keys)
    qs, query_mask = pad_sets(queries)
    b, t, n = len(fragments), max(len(x) for x in tok_frag), max(counts)
    tf = torch.zeros(b, t, dtype=torch.long)
    ts = torch.zeros(b, t, dtype=torch.long)
    tid = torch.zeros(b, t, dtype=torch.long)
    tmask = torch.zeros(b, t, dtype=torch.bool)
    fmask = torch.zeros(b, n, dtype=torch.bool)
    anchor = torch.zeros(b, n, dtype=torch.bool)
    for i in range(b):
        k = len(tok_frag[i])
        tf[i, :k] = torch.from_numpy(tok_frag[i])
        ts[i, :k] = torch.from_numpy(tok_slot[i])
        tid[i, :k] = torch.from_numpy(tok_fid[i])
        tmask[i, :k] = True
        fmask[i, : counts[i]] = True
        if anchors is not None and anchors[i] is not None:
            anchor[i, anchors[i]] = True
    return FragmentTokens(points, point_mask, qs, query_mask, tf, ts, tid, tmask, fmask, anchor, counts)


def pad_poses(poses: list[PoseState], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-sample poses into ``(B, n, 3, 3)``, ``(B, n, 3)`` (identity padding)."""
    rot = np.tile(np.eye(3), (len(poses), n, 1, 1))
    trans = np.zeros((len(poses), n, 3))
    for i, p in enumerate(poses):
        rot[i, : len(p)] = p.rotation
        trans[i, : len(p)] = p.translation
    return rot, trans


class AssemblyBranch(nn.Module):
    """Transformer over the concatenated fragment tokens of each sample.

    Each token carries the fragment's decoded VAE latent, a Fourier embedding
    of its query point placed by the fragment's current pose, a projection of
    the flattened pose and an anchor flag. Velocities are read out per
    fragment by mean pooling followed by two-layer heads whose last layers
    start at zero.
    """

    def __init__(self, config: AssemblyConfig | None = None, feature_dim: int = 64):
        super().__init__()
        self.config = cfg = config or AssemblyConfig()
        d = cfg.width
        self.embedder = FourierEmbedder(cfg.num_frequencies)
        self.feat_proj = nn.Linear(feature_dim, d)
        self.pos_proj = nn.Linear(self.embedder.out_dim, d)
        self.pose_proj = nn.Linear(12, d)
        self.anchor_emb = nn.Embedding(2, d)
        self.time = TimeEmbedding(d)
        self.stack = SkipStack(d, cfg.heads, cfg.depth)
        self.out_norm = nn.LayerNorm(d)
        self.rot_head = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 3))
        self.trans_head = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, 3))
        for head in (self.rot_head, self.trans_head):
            nn.init.zeros_(head[-1].weight)
            nn.init.zeros_(head[-1].bias)

    @property
    def depth(self) -> int:
        return self.config.depth

    def embed(self, features, tokens: FragmentTokens, rot, trans, t):
        """Input token stream ``(B, T, d)`` and time embedding ``(B, d)``."""
        if tokens.tok_mask.shape[1] == 0:
            raise EmptyInput("no fragment tokens")
        fid = tokens.tok_fid
        pose = torch.cat([rot.flatten(-2), trans], dim=-1)  # (B, N, 12)
        r_tok = gather_groups(rot.flatten(-2), fid).unflatten(-1, (3, 3))
        a_tok = gather_groups(trans, fid)
        posed = (r_tok @ tokens.token_positions()[..., None])[..., 0] + a_tok
        h = (
            self.feat_proj(features)
            + self.pos_proj(self.embedder(posed))
            + gather_groups(self.pose_proj(pose), fid)
            + self.anchor_emb(gather_groups(tokens.anchor.long()[..., None], fid)[..., 0])
        )
        return h, self.time(t)

    def head(self, h, tokens: FragmentTokens):
        pooled = masked_mean(self.out_norm(h), tokens.tok_fid, tokens.tok_mask, tokens.max_fragments)
        return self.rot_head(pooled), self.trans_head(pooled)

    def forward(self, features, tokens: FragmentTokens, rot, trans, t, cond):
        """Returns ``(rot_vel, trans_vel, hidden)`` with velocities ``(B, N, 3)``."""
        h, temb = self.embed(features, tokens, rot, trans, t)
        h, hidden = self.stack(h, temb, cond, mask=tokens.tok_mask)
        rv, tv = self.head(h, tokens)
        return rv, tv, hidden


def assembly_loss(rot_vel, trans_vel, rot_target, trans_target, weight=None):
    """Squared velocity error summed over fragments (and coordinates), averaged over the batch.

    Inputs are ``(B, N, 3)``; ``weight (B, N)`` selects the fragments that
    count (padding and the anchor are excluded).
    """
    if rot_vel.shape != rot_target.shape or trans_vel.shape != trans_target.shape:
        raise ShapeMismatch(f"{tuple(rot_vel.shape)} vs {tuple(rot_target.shape)}")
    per = ((rot_vel - rot_target) ** 2).sum(-1) + ((trans_vel - trans_target) ** 2).sum(-1)
    if weight is not None:
        per = per * weight.to(per.dtype)
    return per.sum(-1).mean()


def anchor_gauge(poses: PoseState) -> PoseState:
    """Shift all translations so their centroid is the origin."""
    return PoseState(poses.rotation.copy(), poses.translation - poses.translation.mean(axis=0))
