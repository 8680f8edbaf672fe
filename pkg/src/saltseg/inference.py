"""Prediction with horizontal-flip TTA, thresholding and small-component cleanup."""
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from . import tensor as T
from .data import NATIVE_SIZE, build_batch, crop_native, hflip
from .errors import ConfigurationError, FormatError


@dataclass
class PredictionConfig:
    threshold: float = 0.45
    min_component_area: int = 20    # at 101×101; scaled by image area otherwise
    connectivity: int = 8
    tta_hflip: bool = True
    average: str = "prob"           # or "logit"

    def validate(self):
        def bad(name, msg):
            raise ConfigurationError(f"predict.{name} = {getattr(self, name)!r}: {msg}")

        if not 0 < self.threshold < 1:
            bad("threshold", "must lie in (0, 1)")
        if self.min_component_area < 0:
            bad("min_component_area", "must be >= 0")
        if self.connectivity not in (4, 8):
            bad("connectivity", "allowed values are 4 and 8")
        if self.average not in ("prob", "logit"):
            bad("average", "allowed values are prob and logit")
        return self

    def to_dict(self):
        return asdict(self)

    def area_for(self, h, w):
        return int(round(self.min_component_area * h * w / NATIVE_SIZE ** 2))


def _native_logits(model, samples, d_min, d_max):
    z = model(build_batch(samples, d_min, d_max, model.config), training=False).data[:, 0]
    h, w = samples[0].image.shape
    return crop_native(z, h, w)


def predict_logit_pairs(model, samples, d_min, d_max, tta):
    """Native-size logits for the samples and, with tta, for their mirror
    images flipped back. The flip is applied to the raw image so depth and
    coordinate planes are rebuilt rather than mirrored."""
    with T.no_grad():
        plain = _native_logits(model, samples, d_min, d_max)
        if not tta:
            return plain, None
        mirrored = _native_logits(model, [hflip(s) for s in samples], d_min, d_max)[..., ::-1]
    return plain, mirrored


def combine(plain, mirrored, average):
    if mirrored is None:
        return T._sigmoid(plain)
    if average == "logit":
        return T._sigmoid((plain + mirrored) / 2)
    return (T._sigmoid(plain) + T._sigmoid(mirrored)) / 2


def tta_predict(model, sample, d_min, d_max, pconfig):
    """Probability map at the sample's native size."""
    plain, mirrored = predict_logit_pairs(model, [sample], d_min, d_max, pconfig.tta_hflip)
    return combine(plain, mirrored, pconfig.average)[0]


def predict_probabilities(members, samples, pconfig, batch_size=16):
    """Mean probability over ensemble members, each a (model, d_min, d_max) triple."""
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        acc = None
        for model, d_min, d_max in members:
            p = combine(*predict_logit_pairs(model, chunk, d_min, d_max, pconfig.tta_hflip), pconfig.average)
            acc = p if acc is None else acc + p
        out.extend(acc / len(members))
    return out


def binarize(prob, threshold):
    return (np.asarray(prob) > threshold).astype(np.uint8)


def remove_small_components(mask, min_area, connectivity=8):
    """Drop white islands below min_area, then fill black holes below min_area."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    out = (np.asarray(mask) > 0).astype(np.uint8)
    if min_area <= 0:
        return out
    for value in (1, 0):
        labels, areas = kernels.label_components((out == value).astype(np.uint8), connectivity)
        small = np.concatenate([[False], areas < min_area])
        out[small[labels]] = 1 - value
    return out


def postprocess(prob, pconfig):
    h, w = prob.shape
    return remove_small_components(binarize(prob, pconfig.threshold), pconfig.area_for(h, w), pconfig.connectivity)


# -- PGM dump ------------------------------------------------------------------------------

def write_pgm16(path, prob):
    """Binary 16-bit PGM of a [0, 1] map."""
    q = np.round(np.clip(prob, 0.0, 1.0) * 65535).astype(">u2")
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes())


def read_pgm16(path):
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"65535":
        raise FormatError(f"{path}: not a 16-bit binary PGM")
    w, h = (int(v) for v in parts[1].split())
    q = np.frombuffer(parts[3], dtype=">u2")
    if q.size != h * w:
        raise FormatError(f"{path}: expected {h * w} samples, found {q.size}")
    return q.reshape(h, w) / 65535.0
