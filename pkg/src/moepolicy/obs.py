"""Observation pipeline: raw (proprio, images, instruction) to encoder tokens.

Produces the token sequence [cls, prop, task, img_1..img_M] plus the low-level
feature grid used by the decoder's first cross-attention block. The sequence
order and role layout are fixed: slot 0 cls, slot 1 prop, slot 2 task, image
tokens from slot 3 on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T

N_SPECIAL = 3  # cls, prop, task

STEM_CHANNELS = (16, 32)
STEM_KERNELS = (5, 3)
STEM_STRIDES = (4, 2)


@dataclass
class Observation:
    """One policy input frame. Images are (V, H, W, 3) floats in [0, 1]."""

    q: np.ndarray
    images: np.ndarray
    instruction: str

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.images = np.asarray(self.images)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be (V, H, W, 3), got {self.images.shape}")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")


class TaskVocabulary:
    """Bijection between instruction strings and task ids (= row index)."""

    def __init__(self, instructions):
        self.instructions = list(instructions)
        if len(set(self.instructions)) != len(self.instructions):
            raise ValueError("duplicate instruction in task vocabulary")
        self._ids = {s: i for i, s in enumerate(self.instructions)}

    def __len__(self):
        return len(self.instructions)

    def __eq__(self, other):
        return isinstance(other, TaskVocabulary) and self.instructions == other.instructions

    def id_of(self, instruction: str) -> int:
        try:
            return self._ids[instruction]
        except KeyError:
            raise ValueError(f"unknown task instruction: {instruction!r}") from None

    def instruction_of(self, task_id: int) -> str:
        return self.instructions[task_id]


@dataclass
class TokenBatch:
    """Assembled encoder input plus the quantities routed around it."""

    tokens: T.Tensor  # (B, 3 + M, d_model)
    n_img: int
    x_prop: T.Tensor  # (B, d_model), pre-encoder prop embedding
    z_task: T.Tensor  # (B, d_model)
    f_low: T.Tensor  # (B, V * gh * gw, d_model)
    low_grid: tuple = field(default=None)  # (V, gh, gw)
    img_grid: tuple = field(default=None)  # (V, gh, gw)


class ObsPipeline(nn.Module):
    """Shared-weight conv stem over views + proprio/task embeddings + assembly."""

    def __init__(self, cfg, vocab: TaskVocabulary, rng, dtype):
        d = cfg.d_model
        h, w, v = cfg.image_hw, cfg.image_hw, cfg.n_views
        c1, c2 = STEM_CHANNELS
        k1, k2 = STEM_KERNELS
        s1, s2 = STEM_STRIDES
        self.vocab = vocab
        self.n_views = v
        self.hw = h
        self.low_grid = (v, h // s1, w // s1)
        self.img_grid = (v, h // (s1 * s2), w // (s1 * s2))
        self.n_img = v * self.img_grid[1] * self.img_grid[2]

        self.conv1_w = nn.uniform_init(rng, (k1, k1, 3, c1), k1 * k1 * 3, dtype)
        self.conv1_b = nn.zeros_param((c1,), dtype)
        self.conv2_w = nn.uniform_init(rng, (k2, k2, c1, c2), k2 * k2 * c1, dtype)
        self.conv2_b = nn.zeros_param((c2,), dtype)
        self.proj_low = nn.Linear(c1, d, rng, dtype)
        self.proj_img = nn.Linear(c2, d, rng, dtype)
        self.proj_prop = nn.Linear(cfg.d_q, d, rng, dtype)
        self.task_emb = nn.Embedding(len(vocab), d, rng, dtype)
        self.cls_token = nn.normal_init(rng, (d,), 0.02, dtype)
        self.pos_special = nn.normal_init(rng, (N_SPECIAL, d), 0.02, dtype)
        self.pos_img = nn.normal_init(rng, (self.img_grid[1] * self.img_grid[2], d), 0.02, dtype)
        self.pos_low = nn.normal_init(rng, (self.low_grid[1] * self.low_grid[2], d), 0.02, dtype)
        self.view_off_img = nn.normal_init(rng, (v, 1, d), 0.02, dtype)
        self.view_off_low = nn.normal_init(rng, (v, 1, d), 0.02, dtype)
        self.dtype = dtype

    def embed_image(self, images):
        """images: (B, V, H, W, 3) array -> (img tokens (B, M, d), f_low (B, m_low, d))."""
        b, v, h, w, _ = images.shape
        if v != self.n_views or h != self.hw or w != self.hw:
            raise ValueError(f"image stack {images.shape} does not match configured ({self.n_views}, {self.hw}, {self.hw}, 3)")
        x = T.Tensor(np.ascontiguousarray(images.reshape(b * v, h, w, 3), dtype=self.dtype))
        h1 = T.relu(T.conv2d(x, self.conv1_w, self.conv1_b, STEM_STRIDES[0]))
        _, gh1, gw1, c1 = h1.shape
        low = _with_positions(
            self.proj_low(T.reshape(h1, (b * v, gh1 * gw1, c1))), self.pos_low, self.view_off_low, b, v
        )
        h2 = T.relu(T.conv2d(h1, self.conv2_w, self.conv2_b, STEM_STRIDES[1]))
        _, gh2, gw2, c2 = h2.shape
        img = _with_positions(
            self.proj_img(T.reshape(h2, (b * v, gh2 * gw2, c2))), self.pos_img, self.view_off_img, b, v
        )
        return img, low

    def embed_proprio(self, q):
        """q: (B, d_q) -> (B, d_model)."""
        q = np.asarray(q)
        if q.shape[-1] != self.proj_prop.w.shape[0]:
            raise ValueError(f"proprio length {q.shape[-1]} != configured {self.proj_prop.w.shape[0]}")
        return self.proj_prop(T.Tensor(q.astype(self.dtype).reshape(1, -1) if q.ndim == 1 else q.astype(self.dtype)))

    def resolve_task(self, instruction: str):
        """Exact-string lookup -> (task_id, embedding row as (1, d) tensor)."""
        tid = self.vocab.id_of(instruction)
        return tid, self.task_emb([tid])

    def assemble_sequence(self, x_prop, z_task, img_tokens):
        """Prepend the cls token and tag layout: [cls, prop, task, img...]."""
        b = x_prop.shape[0]
        d = x_prop.shape[-1]
        cls = T.add(T.reshape(self.cls_token, (1, 1, d)), T.Tensor(np.zeros((b, 1, d), dtype=self.dtype)))
        special = T.concat([cls, T.reshape(x_prop, (b, 1, d)), T.reshape(z_task, (b, 1, d))], axis=1)
        special = T.add(special, self.pos_special)
        return T.concat([special, img_tokens], axis=1)

    def __call__(self, images, q, task_ids):
        """Full pipeline for a batch -> TokenBatch."""
        img, low = self.embed_image(images)
        x_prop = self.embed_proprio(q)
        z_task = self.task_emb(task_ids)
        tokens = self.assemble_sequence(x_prop, z_task, img)
        return TokenBatch(
            tokens=tokens,
            n_img=self.n_img,
            x_prop=x_prop,
            z_task=z_task,
            f_low=low,
            low_grid=self.low_grid,
            img_grid=self.img_grid,
        )


def _with_positions(x, pos, view_off, b, v):
    """x: (B*V, m, d) += per-cell positional encoding and per-view offset -> (B, V*m, d)."""
    m, d = x.shape[1], x.shape[2]
    x = T.add(x, pos)
    x = T.reshape(x, (b, v, m, d))
    x = T.add(x, view_off)
    return T.reshape(x, (b, v * m, d))
