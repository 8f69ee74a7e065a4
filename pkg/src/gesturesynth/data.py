"""Synthetic gesture corpora, skeleton kinematics, and quality filtering.

Clips carry per-frame joint offsets in parent-relative coordinates, a
16 kHz audio track whose energy envelope drives the arm motion (so an
audio-to-gesture mapping is genuinely learnable), per-speaker motion
signatures, a token sequence, and per-joint confidences.  Corpora
serialize to JSON-lines with base64 float32 payloads.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, add, stack

__all__ = [
    "Skeleton",
    "GestureClip",
    "Corpus",
    "CorpusFormatError",
    "skeleton_preset",
    "rel_to_abs",
    "abs_to_rel",
    "rel_to_abs_tensor",
    "filter_sot",
    "generate_corpus",
    "save_corpus",
    "load_corpus",
    "corpus_stats",
    "format_stats_table",
    "clip_fragments",
]

FORMAT_VERSION = (1, 0)


class CorpusFormatError(ValueError):
    """Corpus file rejected; message carries the offending line."""


class Skeleton:
    """Joint tree: parent index per joint, root is joint 0 (its own parent)."""

    def __init__(self, parents, names=None):
        parents = tuple(int(p) for p in parents)
        if len(parents) < 3:
            raise ValueError("skeleton needs at least 3 joints")
        if parents[0] != 0:
            raise ValueError("joint 0 must be the root (its own parent)")
        j = len(parents)
        for i, p in enumerate(parents):
            if not 0 <= p < j:
                raise ValueError(f"joint {i}: parent {p} out of range")
        # verify every joint reaches the root (rejects cycles)
        for i in range(j):
            seen = set()
            cur = i
            while cur != 0:
                if cur in seen:
                    raise ValueError(f"cyclic parent graph at joint {i}")
                seen.add(cur)
                cur = parents[cur]
        self.parents = parents
        self.names = tuple(names) if names else tuple(f"joint{i}" for i in range(j))
        if len(self.names) != j:
            raise ValueError("names length must match joint count")
        # parents-first ordering for kinematics
        order = [0]
        remaining = set(range(1, j))
        while remaining:
            placed = {i for i in remaining if parents[i] not in remaining}
            order.extend(sorted(placed))
            remaining -= placed
        self.order = tuple(order)

    @property
    def joint_count(self):
        return len(self.parents)

    def to_dict(self):
        return {"parents": list(self.parents), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["parents"], d.get("names"))


_ARM = ("shoulder", "elbow", "wrist", "hand")


def skeleton_preset(name):
    """Named skeletons: ``desk11`` (default) and the wide ``full59``."""
    if name == "desk11":
        names = ["root", "spine", "head"]
        parents = [0, 0, 1]
        for side in ("left", "right"):
            base = 1  # arms hang off the spine
            for k, part in enumerate(_ARM):
                names.append(f"{side}_{part}")
                parents.append(base if k == 0 else len(parents) - 1)
        return Skeleton(parents, names)
    if name == "full59":
        names = ["root", "spine1", "spine2", "spine3", "neck", "head"]
        parents = [0, 0, 1, 2, 3, 4]
        for side in ("left", "right"):
            names += [f"{side}_{p}" for p in _ARM]
            parents += [3, len(parents), len(parents) + 1, len(parents) + 2]
            for f in range(5):
                for seg in range(3):
                    names.append(f"{side}_finger{f}_{seg}")
                    parents.append(
                        len(parents) - 1 if seg else names.index(f"{side}_hand")
                    )
        for side in ("left", "right"):
            for part in ("hip", "knee", "ankle"):
                names.append(f"{side}_{part}")
                parents.append(0 if part == "hip" else len(parents) - 1)
        skel = Skeleton(parents, names)
        assert skel.joint_count == 59
        return skel
    raise ValueError(f"unknown skeleton preset {name!r}")


def arm_joint_indices(skeleton):
    """(left, right) arm joint index lists, shoulder outward."""
    left = [i for i, n in enumerate(skeleton.names)
            if n.startswith("left_") and any(p in n for p in _ARM)]
    right = [i for i, n in enumerate(skeleton.names)
             if n.startswith("right_") and any(p in n for p in _ARM)]
    return left, right


def rel_to_abs(skeleton, rel):
    """Forward kinematics: abs[j] = abs[parent[j]] + rel[j]."""
    rel = np.asarray(rel, dtype=np.float64)
    if rel.shape[-2] != skeleton.joint_count:
        raise ValueError(
            f"frames have {rel.shape[-2]} joints, skeleton {skeleton.joint_count}"
        )
    out = np.empty_like(rel)
    for j in skeleton.order:
        if j == 0:
            out[..., 0, :] = rel[..., 0, :]
        else:
            out[..., j, :] = out[..., skeleton.parents[j], :] + rel[..., j, :]
    return out


def abs_to_rel(skeleton, absolute):
    """Inverse kinematics: rel[j] = abs[j] - abs[parent[j]]."""
    absolute = np.asarray(absolute, dtype=np.float64)
    if absolute.shape[-2] != skeleton.joint_count:
        raise ValueError(
            f"frames have {absolute.shape[-2]} joints, skeleton {skeleton.joint_count}"
        )
    out = np.empty_like(absolute)
    out[..., 0, :] = absolute[..., 0, :]
    for j in range(1, skeleton.joint_count):
        out[..., j, :] = absolute[..., j, :] - absolute[..., skeleton.parents[j], :]
    return out


def rel_to_abs_tensor(skeleton, frames):
    """Differentiable forward kinematics over a (..., J, 3) tensor."""
    j_axis = frames.ndim - 2
    if frames.shape[j_axis] != skeleton.joint_count:
        raise ValueError("joint count mismatch")
    key = [slice(None)] * frames.ndim
    parts = [None] * skeleton.joint_count
    for j in skeleton.order:
        key[j_axis] = j
        rel_j = frames[tuple(key)]
        parts[j] = rel_j if j == 0 else add(parts[skeleton.parents[j]], rel_j)
    return stack(parts, axis=j_axis)


def filter_sot(clips, tau=0.05):
    """Keep clips whose median joint confidence is at least ``tau``."""
    return [c for c in clips if float(np.median(c.confidences)) >= tau]


@dataclass
class GestureClip:
    frames: np.ndarray          # (F, J, 3) parent-relative offsets
    confidences: np.ndarray     # (F, J) in [0, 1]
    speaker: int
    tokens: list
    audio: np.ndarray           # 16 kHz mono
    fps: int = 15
    audio_rate: int = 16000

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def duration(self):
        return self.n_frames / self.fps


@dataclass
class Corpus:
    clips: list
    splits: list
    seed: int
    config: dict = field(default_factory=dict)
    skeleton: Skeleton = None

    def subset(self, split):
        return [c for c, s in zip(self.clips, self.splits) if s == split]


def _rest_pose(skeleton):
    """Constant parent-relative offsets giving a plausible standing pose."""
    rest = np.zeros((skeleton.joint_count, 3))
    for j, name in enumerate(skeleton.names):
        if "spine" in name:
            rest[j] = (0.0, 0.0, 0.25)
        elif "head" in name or "neck" in name:
            rest[j] = (0.0, 0.0, 0.15)
        elif "shoulder" in name:
            rest[j] = (-0.18 if name.startswith("left") else 0.18, 0.0, 0.05)
        elif "elbow" in name:
            rest[j] = (-0.14 if name.startswith("left") else 0.14, 0.0, -0.08)
        elif "wrist" in name:
            rest[j] = (-0.12 if name.startswith("left") else 0.12, 0.02, -0.06)
        elif "hand" in name:
            rest[j] = (-0.05 if name.startswith("left") else 0.05, 0.03, -0.02)
        elif "finger" in name:
            rest[j] = (-0.015 if name.startswith("left") else 0.015, 0.01, 0.0)
        elif "hip" in name:
            rest[j] = (-0.1 if name.startswith("left") else 0.1, 0.0, -0.05)
        elif "knee" in name or "ankle" in name:
            rest[j] = (0.0, 0.0, -0.3)
    return rest


def _stroke_envelope(n_frames, centers, width=3.0):
    t = np.arange(n_frames)[:, None]
    bumps = np.exp(-0.5 * ((t - np.asarray(centers)[None, :]) / width) ** 2)
    env = bumps.max(axis=1)
    return env


def generate_corpus(cfg, seed):
    """Procedural corpus; byte-identical for identical (cfg, seed)."""
    if cfg.min_frames < 8 or cfg.max_frames < cfg.min_frames:
        raise ValueError("invalid frame range")
    if cfg.n_speakers < 1 or cfg.n_clips < 1:
        raise ValueError("invalid corpus size")
    skeleton = skeleton_preset(cfg.skeleton)
    rest = _rest_pose(skeleton)
    left, right = arm_joint_indices(skeleton)
    moving = left + right
    root = np.random.default_rng(seed)
    clip_seeds = root.integers(0, 2**63 - 1, size=cfg.n_clips)
    fps, rate = 15, 16000
    clips = []
    for ci in range(cfg.n_clips):
        rng = np.random.default_rng(clip_seeds[ci])
        n_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        speaker = int(rng.integers(0, cfg.n_speakers))
        amp = cfg.base_amplitude * (1.0 + cfg.amplitude_gap * speaker)
        freq = cfg.base_frequency + cfg.frequency_gap * speaker
        centers = rng.uniform(4, n_frames - 4, size=cfg.strokes_per_clip)
        env = _stroke_envelope(n_frames, centers)
        # motion: seeded sinusoids on the arm joints, envelope-modulated
        frames = np.tile(rest, (n_frames, 1, 1))
        t = np.arange(n_frames) / fps
        for j in moving:
            direction = rng.uniform(-1, 1, 3)
            direction /= max(np.linalg.norm(direction), 1e-9)
            phase = rng.uniform(0, 2 * np.pi)
            jfreq = freq * rng.uniform(0.8, 1.2)
            wave = np.sin(2 * np.pi * jfreq * t + phase)
            gain = amp * (0.2 + 0.8 * env)
            frames[:, j, :] += (gain * wave)[:, None] * direction
        # audio: noise bursts amplitude-modulated by the same envelope
        n_samples = (n_frames * rate) // fps
        sample_env = np.interp(
            np.arange(n_samples) * fps / rate, np.arange(n_frames), env
        )
        audio = rng.normal(0.0, 1.0, n_samples) * (0.05 + 0.95 * sample_env) * 0.5
        # confidences near 1 with seeded dropouts
        conf = np.clip(
            1.0 - np.abs(rng.normal(0.0, cfg.confidence_noise, (n_frames, skeleton.joint_count))),
            0.0,
            1.0,
        )
        drop_mask = rng.random((n_frames, skeleton.joint_count)) < 0.02
        conf[drop_mask] *= 0.1
        if rng.random() < cfg.degraded_fraction:
            conf *= 0.01
        # token sequence from a small template grammar
        n_tok = int(rng.integers(cfg.tokens_per_clip // 2, cfg.tokens_per_clip + 1))
        tokens = [int(v) for v in rng.integers(0, cfg.vocab_size, n_tok)]
        tokens[0] = speaker  # speaker marker makes text weakly informative
        clips.append(
            GestureClip(
                frames=frames.astype(np.float32).astype(np.float64),
                confidences=conf.astype(np.float32).astype(np.float64),
                speaker=speaker,
                tokens=tokens,
                audio=audio.astype(np.float32).astype(np.float64),
            )
        )
    n = cfg.n_clips
    n_train = int(round(cfg.train_fraction * n))
    n_val = int(round(cfg.val_fraction * n))
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)
    perm = root.permutation(n)
    splits = [splits[perm[i]] for i in range(n)]
    try:
        import dataclasses

        snapshot = dataclasses.asdict(cfg)
    except TypeError:
        snapshot = dict(vars(cfg))
    return Corpus(clips=clips, splits=splits, seed=seed, config=snapshot,
                  skeleton=skeleton)


def _b64(arr):
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
    ).decode("ascii")


def _unb64(blob, shape):
    arr = np.frombuffer(base64.b64decode(blob), dtype="<f4").astype(np.float64)
    return arr.reshape(shape)


def save_corpus(corpus, path):
    """JSON-lines: header with checksum, then one clip per line."""
    lines = []
    for clip, split in zip(corpus.clips, corpus.splits):
        lines.append(
            json.dumps(
                {
                    "speaker": clip.speaker,
                    "split": split,
                    "tokens": clip.tokens,
                    "fps": clip.fps,
                    "frames_shape": list(clip.frames.shape),
                    "frames": _b64(clip.frames),
                    "conf": _b64(clip.confidences),
                    "audio_len": int(clip.audio.shape[0]),
                    "audio": _b64(clip.audio),
                },
                sort_keys=True,
            )
        )
    payload = "\n".join(lines)
    checksum = hashlib.sha256(payload.encode()).hexdigest()
    header = json.dumps(
        {
            "format": "gesture-corpus",
            "version": list(FORMAT_VERSION),
            "seed": corpus.seed,
            "config": corpus.config,
            "skeleton": corpus.skeleton.to_dict() if corpus.skeleton else None,
            "checksum": checksum,
        },
        sort_keys=True,
    )
    with open(path, "w") as fh:
        fh.write(header + "\n" + payload + ("\n" if payload else ""))


def load_corpus(path):
    with open(path) as fh:
        raw = fh.read()
    lines = raw.splitlines()
    if not lines:
        raise CorpusFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}: line 1: {exc}")
    if header.get("format") != "gesture-corpus":
        raise CorpusFormatError(f"{path}: not a gesture corpus file")
    version = header.get("version", [0])
    if version[0] != FORMAT_VERSION[0]:
        raise CorpusFormatError(
            f"{path}: unsupported major version {version[0]} "
            f"(supported: {FORMAT_VERSION[0]})"
        )
    payload = "\n".join(lines[1:])
    if hashlib.sha256(payload.encode()).hexdigest() != header["checksum"]:
        raise CorpusFormatError(f"{path}: checksum mismatch, file corrupted")
    clips, splits = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}: line {lineno}: {exc}")
        shape = tuple(rec["frames_shape"])
        clips.append(
            GestureClip(
                frames=_unb64(rec["frames"], shape),
                confidences=_unb64(rec["conf"], shape[:2]),
                speaker=int(rec["speaker"]),
                tokens=list(rec["tokens"]),
                audio=_unb64(rec["audio"], (rec["audio_len"],)),
                fps=int(rec.get("fps", 15)),
            )
        )
        splits.append(rec["split"])
    skeleton = (
        Skeleton.from_dict(header["skeleton"]) if header.get("skeleton") else None
    )
    return Corpus(
        clips=clips,
        splits=splits,
        seed=header.get("seed", 0),
        config=header.get("config", {}),
        skeleton=skeleton,
    )


def corpus_stats(corpus):
    durations = [c.duration for c in corpus.clips]
    return {
        "clip_count": len(corpus.clips),
        "total_duration_s": float(np.sum(durations)) if durations else 0.0,
        "mean_duration_s": float(np.mean(durations)) if durations else 0.0,
        "speakers": len({c.speaker for c in corpus.clips}),
        "splits": {s: corpus.splits.count(s) for s in ("train", "val", "test")},
    }


def format_stats_table(corpus):
    s = corpus_stats(corpus)
    rows = [
        ("Number of clips", str(s["clip_count"])),
        ("Total length of clips", f"{s['total_duration_s']:.1f} s"),
        ("Average length of clips", f"{s['mean_duration_s']:.1f} s"),
        ("Number of speakers", str(s["speakers"])),
        ("Train/val/test", "{train}/{val}/{test}".format(**s["splits"])),
    ]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def clip_fragments(clip, n_init, n_gen, stride=None):
    """Cut (initial frames, target frames, aligned audio) training pieces.

    Every fragment spans ``n_init + n_gen`` frames; its audio slice is
    trimmed to exactly floor(span * rate / fps) samples so fragments
    stack into rectangular batches.
    """
    span = n_init + n_gen
    stride = stride or n_gen
    rate, fps = clip.audio_rate, clip.fps
    alen = (span * rate) // fps
    out = []
    for start in range(0, clip.n_frames - span + 1, stride):
        a0 = (start * rate) // fps
        audio = clip.audio[a0 : a0 + alen]
        if audio.shape[0] < alen:
            audio = np.pad(audio, (0, alen - audio.shape[0]))
        out.append(
            {
                "prev": clip.frames[start : start + n_init],
                "target": clip.frames[start + n_init : start + span],
                "audio": audio,
                "tokens": clip.tokens,
                "speaker": clip.speaker,
            }
        )
    return out
