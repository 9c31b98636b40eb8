"""Frozen latent-to-image generator and the KTLW/KTLI file bridge.

The synthetic generator mirrors the two-stage layout of style-based GANs:
a mapping network turns Gaussian noise into latents ``w`` and a synthesis
network turns latents into images. Only the image of the mapping network
counts as valid latent space.
"""
import os
import struct
import time
from dataclasses import dataclass

import numpy as np

from .numeric.layers import Module
from .numeric.tensor import Tensor, get_dtype
from .rng import keyed_rng

LATENT_MAGIC = b"KTLW"
IMAGE_MAGIC = b"KTLI"
BRIDGE_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class BridgeError(ValueError):
    pass


@dataclass
class FrozenGenerator:
    mapping: Module
    synthesis: Module

    @property
    def noise_dim(self):
        return self.mapping.in_dim

    @property
    def H(self):
        return self.mapping.out_dim

    @property
    def d_img(self):
        return self.synthesis.out_dim


@dataclass
class ImageVectorPair:
    label: int
    latent: np.ndarray
    image: np.ndarray
    round: int


def build_synthetic_generator(Z=64, H=32, d_img=192, seed=0):
    if min(Z, H, d_img) < 1:
        raise ValueError("generator dimensions must be positive")
    mapping = Module("G_m", [("fc", Z, H), ("tanh",), ("fc", H, H)], seed, frozen=True)
    synthesis = Module("G_s", [("fc", H, 2 * d_img), ("tanh",),
                               ("fc", 2 * d_img, d_img), ("tanh",)], seed, frozen=True)
    return FrozenGenerator(mapping, synthesis)


def sample_noise(gen, count, seed, *keys):
    return keyed_rng(seed, "noise", *keys).standard_normal((count, gen.noise_dim))


def sample_latents(gen, count, seed, *keys):
    """``count`` latents G_m(eps), eps ~ N(0, I); extra keys select the stream."""
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return np.zeros((0, gen.H), dtype=get_dtype())
    eps = sample_noise(gen, count, seed, *keys)
    return gen.mapping(Tensor(eps)).data


def synthesize_images(gen, latents):
    latents = np.asarray(latents, dtype=get_dtype())
    if latents.ndim != 2 or latents.shape[1] != gen.H:
        raise ValueError(f"latents must be (k, {gen.H}), got {latents.shape}")
    if latents.shape[0] == 0:
        return np.zeros((0, gen.d_img), dtype=get_dtype())
    # row-at-a-time so a batch is bitwise identical to single calls
    return np.concatenate([gen.synthesis(Tensor(row[None, :])).data for row in latents])


def _write(path, magic, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    count, dim = array.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(magic, BRIDGE_VERSION, count, dim))
        fh.write(array.tobytes())
    os.replace(tmp, path)


def _read(path, magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != magic:
        raise BridgeError(f"bad magic in {path}")
    if len(raw) < _HEADER.size:
        raise BridgeError(f"truncated header in {path}")
    _, version, count, dim = _HEADER.unpack_from(raw)
    if version != BRIDGE_VERSION:
        raise BridgeError(f"unsupported bridge version {version}")
    if len(raw) != _HEADER.size + 4 * count * dim:
        raise BridgeError(f"truncated payload in {path}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
    return data.copy()


def bridge_export(latents, path, H=None):
    latents = np.asarray(latents)
    if latents.ndim != 2:
        raise BridgeError("latents must be a 2-d array")
    if H is not None and latents.shape[1] != H:
        raise BridgeError(f"latent dim {latents.shape[1]} != configured H={H}")
    _write(path, LATENT_MAGIC, latents)


def read_latent_file(path, H=None):
    latents = _read(path, LATENT_MAGIC)
    if H is not None and latents.shape[1] != H:
        raise BridgeError(f"latent dim {latents.shape[1]} != configured H={H}")
    return latents


def write_image_file(images, path):
    _write(path, IMAGE_MAGIC, images)


def bridge_import(path, expected_count=None, d_img=None):
    images = _read(path, IMAGE_MAGIC)
    if expected_count is not None and images.shape[0] != expected_count:
        raise BridgeError(f"image count {images.shape[0]} != exported latent count {expected_count}")
    if d_img is not None and images.shape[1] != d_img:
        raise BridgeError(f"image dim {images.shape[1]} != configured d_img={d_img}")
    return images


def serve_bridge_request(gen, latent_path, image_path):
    """Answer one latent file with an image file using ``gen``; a stand-in
    for an external generator process."""
    latents = read_latent_file(latent_path, H=gen.H)
    write_image_file(synthesize_images(gen, latents), image_path)


class BridgeSynthesizer:
    """Routes synthesis through files in ``directory``.

    Each request writes ``round_<t>.ktlw`` and waits for ``round_<t>.ktli``.
    """

    def __init__(self, directory, H, d_img, timeout=600.0, poll=0.05):
        self.directory = directory
        self.H, self.d_img = H, d_img
        self.timeout, self.poll = timeout, poll
        os.makedirs(directory, exist_ok=True)

    def paths(self, round_idx):
        stem = os.path.join(self.directory, f"round_{round_idx:06d}")
        return stem + ".ktlw", stem + ".ktli"

    def __call__(self, latents, round_idx):
        latent_path, image_path = self.paths(round_idx)
        bridge_export(latents, latent_path, H=self.H)
        deadline = time.monotonic() + self.timeout
        while not os.path.exists(image_path):
            if time.monotonic() > deadline:
                raise BridgeError(f"timed out waiting for {image_path}")
            time.sleep(self.poll)
        return bridge_import(image_path, expected_count=len(latents), d_img=self.d_img)
