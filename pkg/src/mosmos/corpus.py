"""Synthetic "geometric organ" corpora and their on-disk container.

Every canonical tag owns one shape prototype (a family plus fixed
proportions and an intensity band), so a pixel's appearance carries the
identity of the organ covering it. Pre-training samples are 2D images with
templated reports; fine-tuning samples are 2D or 3D volumes with masks.

Each sample is generated from its own generator seeded with
``(seed, sample_id)``, so any subset can be produced independently.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tagvocab import TagVocabulary, default_vocabulary, extract_tags

MIN_DIM = 16
MAX_ORGANS = 5
SYNONYM_PROB = 0.3
MIN_VISIBLE = 0.5
MIN_TAG_FREQ = 0.01

FAMILIES = ("disk", "ring", "rectangle", "cross", "ellipse")


class GenerationError(ValueError):
    pass


class DatasetError(IOError):
    pass


@dataclass(frozen=True)
class Prototype:
    family: str
    # per-axis half extents as a fraction of the smallest spatial dim
    scales: tuple
    intensity: float
    # ring: inner/outer radius ratio; cross: arm half-width / arm half-length
    aux: float = 0.0


def _prototypes(K):
    """Deterministic prototype table, one entry per tag index."""
    variants = {
        "disk": [((0.12, 0.12), 0.0), ((0.17, 0.17), 0.0), ((0.09, 0.09), 0.0), ((0.14, 0.14), 0.0)],
        "ring": [((0.17, 0.17), 0.5), ((0.20, 0.20), 0.7), ((0.15, 0.15), 0.35), ((0.19, 0.19), 0.55)],
        "rectangle": [((0.16, 0.08), 0.0), ((0.08, 0.16), 0.0), ((0.11, 0.11), 0.0), ((0.18, 0.06), 0.0)],
        "cross": [((0.17, 0.17), 0.3), ((0.20, 0.20), 0.22), ((0.14, 0.14), 0.4), ((0.19, 0.12), 0.3)],
        "ellipse": [((0.20, 0.10), 0.0), ((0.10, 0.20), 0.0), ((0.16, 0.08), 0.0), ((0.08, 0.15), 0.0)],
    }
    protos = []
    for k in range(K):
        family = FAMILIES[k % len(FAMILIES)]
        scales, aux = variants[family][(k // len(FAMILIES)) % 4]
        # interleaved so neighbouring intensity bands belong to different families
        intensity = 0.3 + 0.65 * ((k * 7) % K) / max(K - 1, 1)
        protos.append(Prototype(family, scales, round(intensity, 4), aux))
    return protos


def _shape_mask(proto, center, half, grid):
    """Boolean mask of one primitive on a coordinate grid (list of arrays)."""
    u = [(g - c) / h for g, c, h in zip(grid, center, half)]
    if proto.family in ("disk", "ellipse"):
        return sum(x * x for x in u) <= 1.0
    if proto.family == "ring":
        r2 = sum(x * x for x in u)
        return (r2 <= 1.0) & (r2 >= proto.aux ** 2)
    if proto.family == "rectangle":
        return np.max(np.abs(np.stack(u)), axis=0) <= 1.0
    if proto.family == "cross":
        out = np.zeros(grid[0].shape, dtype=bool)
        for a in range(len(u)):
            arm = np.abs(u[a]) <= 1.0
            for b in range(len(u)):
                if b != a:
                    arm &= np.abs(u[b]) <= proto.aux
            out |= arm
        return out
    raise GenerationError(f"unknown shape family {proto.family!r}")


def _check_dims(dims, names):
    for n, d in zip(names, dims):
        if d < MIN_DIM:
            raise GenerationError(
                f"dimension {n}={d} too small to place a primitive (minimum {MIN_DIM})"
            )


def _place(rng, protos, spatial, size_jitter):
    """Paint ``protos`` in order; returns (label map, per-organ half extents) or None.

    Placement fails when any organ keeps less than MIN_VISIBLE of its area.
    """
    grid = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spatial], indexing="ij")
    label = np.zeros(spatial, dtype=np.int64)
    areas = []
    base = min(spatial)
    for i, proto in enumerate(protos):
        scales = list(proto.scales) + [float(np.mean(proto.scales))] * (len(spatial) - 2)
        jitter = rng.uniform(1 - size_jitter, 1 + size_jitter, size=len(spatial))
        half = np.maximum(np.array(scales) * base * jitter, 1.5)
        center = [rng.uniform(h, s - 1 - h) for h, s in zip(half, spatial)]
        m = _shape_mask(proto, center, half, grid)
        if m.sum() < 4:
            return None
        label[m] = i + 1
        areas.append(int(m.sum()))
    for i, area in enumerate(areas):
        if (label == i + 1).sum() < MIN_VISIBLE * area:
            return None
    return label


def _render(rng, label, protos, channels):
    img = 0.05 + 0.03 * rng.standard_normal(label.shape)
    for i, proto in enumerate(protos):
        m = label == i + 1
        level = proto.intensity + rng.uniform(-0.02, 0.02)
        img[m] = level + 0.03 * rng.standard_normal(int(m.sum()))
    img = np.clip(img, 0.0, 1.0)
    return np.repeat(img[..., None], channels, axis=-1).astype(np.float32)


# -- reports --------------------------------------------------------------

FINDING_TEMPLATES = (
    "the {o} is unremarkable.",
    "mild enlargement of the {o} is noted.",
    "there is a hypodense lesion in the {o}.",
    "the {o} appears within normal limits.",
    "a focal calcification is seen in the {o}.",
    "no focal abnormality of the {o}.",
    "the {o} demonstrates heterogeneous enhancement.",
    "{o} contour is smooth.",
)
FILLER_SENTENCES = (
    "study performed with contrast.",
    "no acute findings elsewhere.",
    "comparison with prior imaging is limited.",
    "images are of diagnostic quality.",
)


def _mention(rng, entry):
    forms = entry.surface_forms()
    if forms and rng.random() < SYNONYM_PROB:
        return forms[int(rng.integers(len(forms)))]
    return entry.canonical


def _report(rng, vocab, organ_ids):
    sentences = []
    for k in organ_ids:
        entry = vocab.entries[k]
        n_mentions = 2 if rng.random() < 0.2 else 1
        for _ in range(n_mentions):
            tmpl = FINDING_TEMPLATES[int(rng.integers(len(FINDING_TEMPLATES)))]
            sentences.append(tmpl.format(o=_mention(rng, entry)))
    for _ in range(int(rng.integers(0, 3))):
        sentences.append(FILLER_SENTENCES[int(rng.integers(len(FILLER_SENTENCES)))])
    order = rng.permutation(len(sentences))
    text = " ".join(sentences[j] for j in order)
    return text[0].upper() + text[1:]


# -- samples ----------------------------------------------------------------

@dataclass
class ImageReportSample:
    image: np.ndarray  # H1 x W1 x C1
    report: str
    labels: np.ndarray  # K, from the placement record
    organs: list = field(default_factory=list)


@dataclass
class SegSample:
    volume: np.ndarray  # H2 x W2 (x D2) x C1
    mask: np.ndarray  # H2 x W2 (x D2), 0 = background, q in 1..Q


def _sample_rng(seed, sample_id):
    return np.random.default_rng([int(seed), int(sample_id)])


def gen_pretrain_sample(sample_id, vocab, dims, seed, protos=None):
    H, W, C = dims
    _check_dims((H, W), ("H1", "W1"))
    protos = protos or _prototypes(vocab.K)
    rng = _sample_rng(seed, sample_id)
    for _ in range(200):
        n = int(rng.integers(1, min(MAX_ORGANS, vocab.K) + 1))
        organ_ids = sorted(rng.choice(vocab.K, size=n, replace=False).tolist())
        label = _place(rng, [protos[k] for k in organ_ids], (H, W), 0.15)
        if label is not None:
            break
    else:
        raise GenerationError(f"could not place organs in {H}x{W} image (sample {sample_id})")
    image = _render(rng, label, [protos[k] for k in organ_ids], C)
    labels = np.zeros(vocab.K, dtype=np.int64)
    labels[organ_ids] = 1
    return ImageReportSample(image, _report(rng, vocab, organ_ids), labels, organ_ids)


def gen_pretrain_corpus(n, vocab=None, dims=(32, 32, 1), seed=0):
    """``n`` image-report pairs; deterministic in ``seed``.

    For n >= 100, the corpus is regenerated under a derived seed until every
    tag appears in at least 1% of reports.
    """
    if n < 1:
        raise GenerationError("n must be >= 1")
    vocab = vocab or default_vocabulary()
    protos = _prototypes(vocab.K)
    for attempt in range(20):
        s = seed if attempt == 0 else seed * 1000 + attempt
        samples = [gen_pretrain_sample(i, vocab, dims, s, protos) for i in range(n)]
        if n < 100:
            return samples
        freq = np.stack([x.labels for x in samples]).mean(axis=0)
        if freq.min() >= MIN_TAG_FREQ:
            return samples
    raise GenerationError("tag coverage below 1% after 20 resampling attempts")


def gen_finetune_sample(sample_id, class_protos, dims, seed, channels=1, present_prob=0.9):
    _check_dims(dims, ("H2", "W2", "D2")[: len(dims)])
    rng = _sample_rng(seed, sample_id)
    Q = len(class_protos)
    for _ in range(200):
        present = [q for q in range(Q) if rng.random() < present_prob]
        if not present:
            present = [int(rng.integers(Q))]
        order = rng.permutation(present).tolist()
        label = _place(rng, [class_protos[q] for q in order], tuple(dims), 0.25)
        if label is not None:
            break
    else:
        raise GenerationError(f"could not place organs in volume {tuple(dims)} (sample {sample_id})")
    volume = _render(rng, label, [class_protos[q] for q in order], channels)
    mask = np.zeros(label.shape, dtype=np.int64)
    for i, q in enumerate(order):
        mask[label == i + 1] = q + 1
    return SegSample(volume, mask)


def gen_finetune_corpus(n, dims=(32, 32), Q=6, seed=0, vocab=None, class_names=None, channels=1):
    """``n`` volume/mask pairs over the first ``Q`` tags (or ``class_names``).

    Class names outside the vocabulary (open-set) get prototypes beyond
    the vocabulary's table.
    """
    vocab = vocab or default_vocabulary()
    names = list(class_names) if class_names is not None else vocab.names[:Q]
    if len(names) != Q:
        raise GenerationError(f"got {len(names)} class names for Q={Q}")
    if class_names is None and Q > vocab.K:
        raise GenerationError(f"Q={Q} exceeds vocabulary size K={vocab.K}")
    table = _prototypes(max(vocab.K, 1) + Q)
    protos = []
    extra = vocab.K
    for name in names:
        if name in vocab.names:
            protos.append(table[vocab.index(name)])
        else:
            protos.append(table[extra])
            extra += 1
    return [gen_finetune_sample(i, protos, dims, seed, channels) for i in range(n)]


# -- splits -------------------------------------------------------------------

def make_splits(n, ratios, seed):
    """Partition ``range(n)`` into consecutive chunks of a seeded permutation."""
    ratios = list(ratios)
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    perm = np.random.default_rng([int(seed), 7919]).permutation(n)
    bounds = np.round(np.cumsum([0.0] + ratios) * n).astype(int)
    bounds[-1] = n
    return [sorted(perm[bounds[i]:bounds[i + 1]].tolist()) for i in range(len(ratios))]


def label_subset(train_ids, ratio, seed):
    """Nested subset of ``train_ids``: a fixed seeded order truncated to ``ratio``."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"label ratio must be in (0, 1], got {ratio}")
    order = np.random.default_rng([int(seed), 104729]).permutation(len(train_ids))
    keep = max(1, int(round(ratio * len(train_ids))))
    return sorted(train_ids[i] for i in order[:keep])


# -- persistence --------------------------------------------------------------

@dataclass
class DatasetManifest:
    kind: str
    n: int
    seed: int
    dims: list
    split_names: list
    split_ratios: list
    splits: dict
    vocab_path: Optional[str] = "tags.json"
    class_names: Optional[list] = None
    channels: int = 1

    def __post_init__(self):
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise DatasetError(f"split ratios must sum to 1, got {self.split_ratios}")


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray
    vocab: Optional[TagVocabulary] = None
    reports: Optional[list] = None
    labels: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None

    def split(self, name):
        return self.manifest.splits[name]

    def __len__(self):
        return len(self.images)


def write_array(path, name, arr):
    arr = np.ascontiguousarray(arr)
    data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    (path / f"{name}.bin").write_bytes(data)
    sidecar = {
        "dtype": arr.dtype.name,
        "shape": list(arr.shape),
        "byte_order": "little",
        "nbytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    (path / f"{name}.json").write_text(json.dumps(sidecar, indent=2))


def read_array(path, name):
    try:
        sidecar = json.loads((path / f"{name}.json").read_text())
        data = (path / f"{name}.bin").read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"missing dataset file: {exc.filename}") from exc
    dtype = np.dtype(sidecar["dtype"]).newbyteorder("<")
    shape = tuple(sidecar["shape"])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(data) != expected:
        raise DatasetError(
            f"{name}.bin: expected {expected} bytes for shape {list(shape)} dtype {dtype.name}, "
            f"found {len(data)} bytes (truncated or corrupt blob, or sidecar mismatch)"
        )
    if hashlib.sha256(data).hexdigest() != sidecar["sha256"]:
        raise DatasetError(f"{name}.bin: checksum mismatch (corrupt blob)")
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_dataset(path, dataset: Dataset):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(asdict(dataset.manifest), indent=2))
    write_array(path, "images", dataset.images)
    if dataset.vocab is not None:
        dataset.vocab.save(path / (dataset.manifest.vocab_path or "tags.json"))
    if dataset.reports is not None:
        with open(path / "reports.jsonl", "w") as fh:
            for i, text in enumerate(dataset.reports):
                rec = {"id": i, "text": text}
                if dataset.labels is not None:
                    rec["labels"] = [int(b) for b in dataset.labels[i]]
                fh.write(json.dumps(rec) + "\n")
    if dataset.masks is not None:
        write_array(path, "masks", dataset.masks)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = DatasetManifest(**json.loads((path / "manifest.json").read_text()))
    except FileNotFoundError as exc:
        raise DatasetError(f"no manifest.json in {path}") from exc
    images = read_array(path, "images")
    if len(images) != manifest.n:
        raise DatasetError(f"images: expected {manifest.n} samples, found {len(images)}")
    vocab = None
    if manifest.vocab_path and (path / manifest.vocab_path).exists():
        vocab = TagVocabulary.load(path / manifest.vocab_path)
    reports = labels = masks = None
    if (path / "reports.jsonl").exists():
        recs = [json.loads(line) for line in (path / "reports.jsonl").read_text().splitlines() if line]
        reports = [r["text"] for r in recs]
        if recs and "labels" in recs[0]:
            labels = np.array([r["labels"] for r in recs], dtype=np.int64)
    if (path / "masks.json").exists():
        masks = read_array(path, "masks")
        if masks.shape != images.shape[:-1]:
            raise DatasetError(
                f"masks: expected shape {list(images.shape[:-1])}, found {list(masks.shape)}"
            )
    return Dataset(manifest, images, vocab, reports, labels, masks)


def build_pretrain_dataset(n, vocab=None, dims=(32, 32, 1), seed=0, ratios=(0.9, 0.1)):
    vocab = vocab or default_vocabulary()
    samples = gen_pretrain_corpus(n, vocab, dims, seed)
    parts = make_splits(n, ratios, seed)
    names = ["train", "val", "test"][: len(parts)]
    manifest = DatasetManifest(
        kind="pretrain", n=n, seed=seed, dims=list(dims[:2]), split_names=names,
        split_ratios=list(ratios), splits=dict(zip(names, parts)), channels=dims[2],
    )
    return Dataset(
        manifest,
        np.stack([s.image for s in samples]),
        vocab,
        [s.report for s in samples],
        np.stack([s.labels for s in samples]),
    )


def build_finetune_dataset(n, dims=(32, 32), Q=6, seed=0, vocab=None, class_names=None,
                           ratios=(0.6, 0.1, 0.3), channels=1):
    vocab = vocab or default_vocabulary()
    names_cls = list(class_names) if class_names is not None else vocab.names[:Q]
    samples = gen_finetune_corpus(n, dims, Q, seed, vocab, names_cls, channels)
    parts = make_splits(n, ratios, seed)
    names = ["train", "val", "test"][: len(parts)]
    manifest = DatasetManifest(
        kind="finetune", n=n, seed=seed, dims=list(dims), split_names=names,
        split_ratios=list(ratios), splits=dict(zip(names, parts)),
        class_names=names_cls, channels=channels,
    )
    return Dataset(
        manifest,
        np.stack([s.volume for s in samples]),
        vocab,
        masks=np.stack([s.mask for s in samples]),
    )


def consistent_labels(samples: Sequence[ImageReportSample], vocab: TagVocabulary):
    """Rows where the extractor disagrees with the placement record."""
    return [i for i, s in enumerate(samples) if not np.array_equal(extract_tags(s.report, vocab), s.labels)]
