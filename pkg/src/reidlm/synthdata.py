"""Procedural person re-identification dataset.

Identities are attribute tuples rendered as blocky 64x32 figures.  Each
camera has its own brightness, colour cast and background, and every image
adds a small translation, pose jitter and pixel noise.  Everything is a pure
function of the build config: per-image randomness is seeded from
``(seed, domain_style, id, camera, index)``.
"""

from __future__ import annotations

import colorsys
import itertools
import json
import os
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .tokenizer import DialogueSample, IMAGE_CONTINUATION_INSTRUCTION

HEIGHT, WIDTH, CHANNELS = 64, 32, 3
FORMAT_VERSION = 1

PALETTE = {
    "black": (0.10, 0.10, 0.12),
    "white": (0.92, 0.92, 0.90),
    "gray": (0.52, 0.52, 0.54),
    "red": (0.80, 0.16, 0.14),
    "green": (0.22, 0.62, 0.26),
    "blue": (0.20, 0.30, 0.80),
    "yellow": (0.90, 0.80, 0.22),
    "brown": (0.50, 0.32, 0.16),
}
HUES = tuple(PALETTE)
HATS = ("none", "dark", "light")
BAGS = ("none", "left", "right")
BUILDS = ("slim", "broad")
SKIN_TONES = ((0.93, 0.76, 0.62), (0.80, 0.60, 0.45), (0.55, 0.38, 0.26), (0.36, 0.24, 0.17))

# Instructions for the diverse-prompt baseline.  The first six follow the
# published examples word for word.
BASELINE_PROMPTS = (
    "Describe the appearance of persons in the image, focusing on their attire.",
    "Elucidate the visual features of persons in the image, including their dress style.",
    "Provide a detailed interpretation of the persons' physical attributes in the image, "
    "especially their clothing combinations.",
    "Analyze the observable characteristics of persons in the image, specifically related "
    "to their clothing arrangements.",
    "Depict the physical features of persons in the image, such as their clothing combinations.",
    "Analyze the appearance of persons in the image, with a focus on their clothing coordination.",
    "Summarize what the persons in the image are wearing, from head to toe.",
    "Explain the outfit of the persons in the image, noting the colors of each garment.",
    "Characterize the clothing of persons in the image and how the pieces are combined.",
    "Report the visible attire of persons in the image, including any accessories they carry.",
    "Give an account of the persons' dress in the image, mentioning shirt, pants and shoes.",
    "Outline the look of the persons in the image with attention to their clothing colors.",
    "Detail the garments worn by persons in the image and their overall style.",
    "Identify the clothing items of persons in the image and describe their combination.",
    "Portray the persons in the image by their apparel and body shape.",
    "Describe how the persons in the image are dressed, including hats or bags if present.",
    "State the colors and types of clothing that persons in the image are wearing.",
    "Characterize the appearance of persons in the image through their clothing choices.",
    "Break down the attire of persons in the image piece by piece.",
    "Present a description of persons in the image emphasizing their outfit coordination.",
)
BASELINE_TEMPLATE = "###Human: <Img> <ImageFeature> </Img> {prompt}\n###Assistant:"

# Reference statistics of the public benchmarks, used only as a schema check.
REFERENCE_STATS = {
    "MSMT17": dict(ID_q=3060, ID_g=3060, ID_t=1041, IMG_q=11659, IMG_g=82161, IMG_t=32621, CAM_n=15),
    "Market1501": dict(ID_q=750, ID_g=750, ID_t=751, IMG_q=3368, IMG_g=19732, IMG_t=12936, CAM_n=6),
    "DukeMTMC": dict(ID_q=702, ID_g=702, ID_t=702, IMG_q=2228, IMG_g=17661, IMG_t=16522, CAM_n=8),
    "CUHK03-NP": dict(ID_q=700, ID_g=700, ID_t=767, IMG_q=1400, IMG_g=5332, IMG_t=7365, CAM_n=2),
}


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    shirt: str
    pants: str
    shoes: str
    hat: str
    bag: str
    build: str
    skin: int = 0

    @property
    def attributes(self) -> tuple[str, str, str, str, str, str]:
        return (self.shirt, self.pants, self.shoes, self.hat, self.bag, self.build)


ATTRIBUTE_SPACE = tuple(itertools.product(HUES, HUES, HUES, HATS, BAGS, BUILDS))


@dataclass
class DataConfig:
    num_train_ids: int = 100
    num_eval_ids: int = 50
    imgs_per_id: int = 8
    cams: int = 4
    seed: int = 0
    domain_style: int = 0
    noise_sigma: float = 0.06
    continuations_file: str | None = None


@dataclass
class DatasetStats:
    ID_q: int
    ID_g: int
    ID_t: int
    IMG_q: int
    IMG_g: int
    IMG_t: int
    CAM_n: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def __add__(self, other: "DatasetStats") -> "DatasetStats":
        return DatasetStats(**{f.name: getattr(self, f.name) + getattr(other, f.name)
                               for f in fields(self)})

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class ImageRecord:
    path: str
    pid: int
    cam: int
    idx: int
    split: str


@dataclass
class Dataset:
    config: DataConfig
    identities: dict[int, IdentitySpec]
    records: list[ImageRecord]
    images: np.ndarray  # uint8 [n, H, W, 3], aligned with records
    captions: dict[int, str]
    continuations: dict[int, str]
    mean: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            train = [i for i, r in enumerate(self.records) if r.split == "train"]
            src = self.images[train] if train else self.images
            self.mean = (src.reshape(-1, CHANNELS).mean(axis=0) / 255.0) if len(src) else np.zeros(3)

    def split(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    def float_images(self, indices: Sequence[int]) -> np.ndarray:
        return self.images[np.asarray(indices, dtype=np.int64)].astype(np.float64) / 255.0

    @property
    def train_pids(self) -> list[int]:
        return sorted({r.pid for r in self.records if r.split == "train"})


# ---------------------------------------------------------------------------
# text


def gen_caption(identity: IdentitySpec) -> str:
    text = (f"a {identity.build} person wearing a {identity.shirt} shirt and "
            f"{identity.pants} pants with {identity.shoes} shoes")
    if identity.hat != "none":
        text += f", with a {identity.hat} hat"
    if identity.bag != "none":
        text += f", carrying a bag on the {identity.bag}"
    return text


_CAPTION_RE = re.compile(
    r"^a (?P<build>\w+) person wearing a (?P<shirt>\w+) shirt and (?P<pants>\w+) pants "
    r"with (?P<shoes>\w+) shoes(?:, with a (?P<hat>\w+) hat)?(?:, carrying a bag on the (?P<bag>\w+))?$"
)


def parse_caption(caption: str) -> dict | None:
    m = _CAPTION_RE.match(caption.strip())
    if not m:
        return None
    attrs = m.groupdict()
    attrs["hat"] = attrs["hat"] or "none"
    attrs["bag"] = attrs["bag"] or "none"
    ok = (attrs["shirt"] in PALETTE and attrs["pants"] in PALETTE and attrs["shoes"] in PALETTE
          and attrs["hat"] in HATS and attrs["bag"] in BAGS and attrs["build"] in BUILDS)
    return attrs if ok else None


def gen_continuation(caption: str, external: dict[str, str] | None = None) -> str:
    """Continuation text for ``caption``.

    An entry in ``external`` (e.g. produced by a real language model) takes
    precedence; otherwise a fixed template keyed by the caption's attributes
    is used.
    """
    if external and caption in external:
        return external[caption]
    a = parse_caption(caption)
    if a is None:
        raise KeyError(f"no continuation available for caption {caption!r}")
    text = f"they stride on, {a['shirt']} shirt over {a['pants']} pants, {a['shoes']} shoes"
    if a["hat"] != "none":
        text += f", {a['hat']} hat"
    if a["bag"] != "none":
        text += f", bag on the {a['bag']}"
    text += f", {a['build']} frame"
    return text


def word_count(text: str) -> int:
    return len(re.findall(r"[A-Za-z0-9']+", text))


def build_dialogue(image_ref, caption: str, continuation: str, mode: str,
                   rng: np.random.Generator | None = None, turns: int = 1) -> DialogueSample:
    """Dialogue for one image.

    ``common_instruction`` pairs the fixed image-continuation instruction with
    the continuation; ``baseline_prompt`` draws one of the diverse prompts
    uniformly and targets the caption itself.  Extra turns repeat the
    request as text-only follow-ups.
    """
    if mode == "common_instruction":
        if not continuation:
            raise ValueError("empty continuation")
        first = (IMAGE_CONTINUATION_INSTRUCTION, continuation)
        follow = ("###Human: continue the following text.\n###Assistant:", continuation)
    elif mode == "baseline_prompt":
        if rng is None:
            raise ValueError("baseline_prompt mode needs an rng")
        prompt = BASELINE_PROMPTS[int(rng.integers(len(BASELINE_PROMPTS)))]
        first = (BASELINE_TEMPLATE.format(prompt=prompt), caption)
        follow = (f"###Human: {prompt}\n###Assistant:", caption)
    else:
        raise ValueError(f"unknown dialogue mode {mode!r}")
    if turns < 1:
        raise ValueError("turns must be >= 1")
    return DialogueSample(image_ref, [first] + [follow] * (turns - 1))


# ---------------------------------------------------------------------------
# rendering


def _rotate_hue(rgb, shift: float) -> tuple[float, float, float]:
    h, l, s = colorsys.rgb_to_hls(*rgb)
    return colorsys.hls_to_rgb((h + shift) % 1.0, l, s)


def _domain_palette(style: int) -> dict[str, np.ndarray]:
    shift = 0.07 * style
    return {k: np.array(_rotate_hue(v, shift)) for k, v in PALETTE.items()}


@dataclass
class _Camera:
    brightness: float
    cast: np.ndarray
    background: np.ndarray
    bg_gradient: np.ndarray


def _cameras(cfg: DataConfig) -> list[_Camera]:
    cams = []
    for c in range(cfg.cams):
        rng = np.random.default_rng([cfg.seed, cfg.domain_style, 1_000_003, c])
        if cfg.domain_style % 2 == 0:
            base = rng.uniform(0.25, 0.65, 3) * np.array([0.9, 1.0, 0.95])
        else:
            base = rng.uniform(0.35, 0.8, 3) * np.array([1.0, 0.85, 0.6])
        cams.append(_Camera(
            brightness=float(rng.uniform(-0.15, 0.15)),
            cast=rng.uniform(-0.08, 0.08, 3),
            background=base,
            bg_gradient=rng.uniform(-0.15, 0.15, 3),
        ))
    return cams


def render_person(identity: IdentitySpec, camera: _Camera, palette: dict[str, np.ndarray],
                  rng: np.random.Generator, noise_sigma: float) -> np.ndarray:
    """Float image in [0, 1] of shape (64, 32, 3)."""
    H, W = HEIGHT, WIDTH
    rows = np.linspace(0.0, 1.0, H)[:, None, None]
    img = np.broadcast_to(camera.background + rows * camera.bg_gradient, (H, W, 3)).copy()
    img += rng.normal(0.0, 0.03, (H, W, 3))  # background clutter

    def color(name: str) -> np.ndarray:
        return np.clip(palette[name] + rng.normal(0.0, 0.04, 3), 0, 1)

    cx = W // 2 + int(rng.integers(-1, 2))
    top = 3 + int(rng.integers(-1, 2))
    half_torso = (6 if identity.build == "slim" else 8) + int(rng.integers(0, 2))
    skin = np.array(SKIN_TONES[identity.skin])

    def box(r0, r1, c0, c1, col):
        r0, r1 = max(r0, 0), min(r1, H)
        c0, c1 = max(c0, 0), min(c1, W)
        if r0 < r1 and c0 < c1:
            img[r0:r1, c0:c1] = col

    box(top + 2, top + 11, cx - 4, cx + 4, skin)  # head
    if identity.hat != "none":
        hat = np.array([0.12, 0.10, 0.10]) if identity.hat == "dark" else np.array([0.85, 0.82, 0.75])
        box(top, top + 4, cx - 5, cx + 5, hat + rng.normal(0, 0.03, 3))
    shirt = color(identity.shirt)
    box(top + 11, top + 33, cx - half_torso, cx + half_torso, shirt)
    box(top + 12, top + 30, cx - half_torso - 3, cx - half_torso, shirt * 0.85)  # arms
    box(top + 12, top + 30, cx + half_torso, cx + half_torso + 3, shirt * 0.85)
    pants = color(identity.pants)
    stride = int(rng.integers(1, 4))
    leg_w = 4 if identity.build == "slim" else 5
    box(top + 33, top + 53, cx - stride - leg_w, cx - stride + 1, pants)
    box(top + 33, top + 53, cx + stride - 1, cx + stride + leg_w, pants)
    shoes = color(identity.shoes)
    box(top + 53, top + 57, cx - stride - leg_w - 1, cx - stride + 1, shoes)
    box(top + 53, top + 57, cx + stride - 1, cx + stride + leg_w + 1, shoes)
    if identity.bag != "none":
        bag = np.array([0.35, 0.22, 0.12]) + rng.normal(0, 0.03, 3)
        if identity.bag == "left":
            box(top + 20, top + 34, cx - half_torso - 7, cx - half_torso - 1, bag)
        else:
            box(top + 20, top + 34, cx + half_torso + 1, cx + half_torso + 7, bag)

    # translation (<= 3 px), wrapping at the borders
    dy, dx = (int(v) for v in rng.integers(-3, 4, size=2))
    img = np.roll(img, (dy, dx), axis=(0, 1))
    img = img * (1.0 + camera.brightness) + camera.cast
    img += rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def _sample_identities(cfg: DataConfig) -> list[IdentitySpec]:
    total = cfg.num_train_ids + cfg.num_eval_ids
    if total > len(ATTRIBUTE_SPACE):
        raise ValueError(f"attribute space exhausted: {total} ids > {len(ATTRIBUTE_SPACE)} combinations")
    rng = np.random.default_rng([cfg.seed, cfg.domain_style, 7])
    picks = rng.choice(len(ATTRIBUTE_SPACE), size=total, replace=False)
    skins = rng.integers(0, len(SKIN_TONES), size=total)
    return [IdentitySpec(i, *ATTRIBUTE_SPACE[int(k)], skin=int(s))
            for i, (k, s) in enumerate(zip(picks, skins))]


def load_continuations_file(path: str | os.PathLike | None) -> dict[str, str] | None:
    if not path:
        return None
    return json.loads(Path(path).read_text(encoding="utf-8"))


def build_dataset(cfg: DataConfig | None = None, **overrides) -> Dataset:
    """Render train/query/gallery splits.

    Training identities take ids ``0..num_train_ids-1``; the remaining ids
    form the evaluation set.  Image ``k`` of an identity is shot by camera
    ``k % cams``; for evaluation identities the first
    ``max(1, imgs_per_id // 4)`` images are queries, the rest gallery.
    """
    cfg = cfg or DataConfig()
    if overrides:
        cfg = DataConfig(**{**asdict(cfg), **overrides})
    if cfg.cams < 2:
        raise ValueError("need at least 2 cameras")
    if cfg.imgs_per_id < 2:
        raise ValueError("need at least 2 images per identity")
    identities = _sample_identities(cfg)
    palette = _domain_palette(cfg.domain_style)
    cameras = _cameras(cfg)
    sigma = cfg.noise_sigma + 0.03 * cfg.domain_style
    external = load_continuations_file(cfg.continuations_file)

    n_query = max(1, cfg.imgs_per_id // 4)
    records: list[ImageRecord] = []
    images = []
    for ident in identities:
        is_train = ident.id < cfg.num_train_ids
        for k in range(cfg.imgs_per_id):
            cam = k % cfg.cams
            split = "train" if is_train else ("query" if k < n_query else "gallery")
            rng = np.random.default_rng([cfg.seed, cfg.domain_style, ident.id, cam, k])
            images.append(_to_u8(render_person(ident, cameras[cam], palette, rng, sigma)))
            records.append(ImageRecord(f"{split}/{ident.id}_{cam}_{k}.ppm", ident.id, cam, k, split))
    captions = {i.id: gen_caption(i) for i in identities}
    continuations = {pid: gen_continuation(c, external) for pid, c in captions.items()}
    return Dataset(cfg, {i.id: i for i in identities}, records,
                   np.stack(images) if images else np.zeros((0, HEIGHT, WIDTH, 3), np.uint8),
                   captions, continuations)


def dataset_stats(dataset: Dataset) -> DatasetStats:
    def ids(split):
        return len({r.pid for r in dataset.records if r.split == split})

    def imgs(split):
        return sum(1 for r in dataset.records if r.split == split)

    return DatasetStats(ID_q=ids("query"), ID_g=ids("gallery"), ID_t=ids("train"),
                        IMG_q=imgs("query"), IMG_g=imgs("gallery"), IMG_t=imgs("train"),
                        CAM_n=len({r.cam for r in dataset.records}))


def concat_datasets(a: Dataset, b: Dataset) -> Dataset:
    """Union of two domains; ids and cameras of ``b`` are offset to stay disjoint."""
    id_off = max(a.identities) + 1 if a.identities else 0
    cam_off = max((r.cam for r in a.records), default=-1) + 1
    recs = list(a.records) + [
        ImageRecord(r.path, r.pid + id_off, r.cam + cam_off, r.idx, r.split) for r in b.records]
    idents = dict(a.identities)
    for pid, spec in b.identities.items():
        idents[pid + id_off] = IdentitySpec(pid + id_off, *spec.attributes, skin=spec.skin)
    caps = {**a.captions, **{p + id_off: c for p, c in b.captions.items()}}
    conts = {**a.continuations, **{p + id_off: c for p, c in b.continuations.items()}}
    return Dataset(a.config, idents, recs, np.concatenate([a.images, b.images]), caps, conts)


# ---------------------------------------------------------------------------
# files


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end])
        pos = end
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    data = raw[pos + 1: pos + 1 + w * h * 3]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def _manifest(dataset: Dataset) -> dict:
    splits = {"train": [], "query": [], "gallery": []}
    for r in dataset.records:
        splits[r.split].append({"path": r.path, "id": r.pid, "cam": r.cam, "idx": r.idx})
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(dataset.config),
        "splits": splits,
        "identities": {str(p): list(s.attributes) + [s.skin] for p, s in sorted(dataset.identities.items())},
        "captions": {str(p): c for p, c in sorted(dataset.captions.items())},
        "continuations": {str(p): c for p, c in sorted(dataset.continuations.items())},
    }


def save_dataset(dataset: Dataset, root: str | os.PathLike) -> Path:
    root = Path(root)
    for split in ("train", "query", "gallery"):
        (root / split).mkdir(parents=True, exist_ok=True)
    for rec, img in zip(dataset.records, dataset.images):
        write_ppm(root / rec.path, img)
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(_manifest(dataset), indent=1, sort_keys=True), encoding="utf-8")
    os.replace(tmp, root / "manifest.json")
    return root / "manifest.json"


def load_dataset(root: str | os.PathLike, with_text: bool = True) -> Dataset:
    """Read a dataset directory written by :func:`save_dataset`.

    ``with_text=False`` skips captions and continuations entirely.
    """
    root = Path(root)
    try:
        man = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
        if man.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported manifest format_version {man.get('format_version')!r}")
        cfg = DataConfig(**man["config"])
        records = [ImageRecord(e["path"], int(e["id"]), int(e["cam"]), int(e["idx"]), split)
                   for split in ("train", "query", "gallery") for e in man["splits"][split]]
        idents = {int(p): IdentitySpec(int(p), *v[:6], skin=int(v[6])) for p, v in man["identities"].items()}
        caps = {int(p): c for p, c in man.get("captions", {}).items()} if with_text else {}
        conts = {int(p): c for p, c in man.get("continuations", {}).items()} if with_text else {}
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"corrupt manifest in {root}: {exc}") from exc
    order = {"train": 0, "query": 1, "gallery": 2}
    records.sort(key=lambda r: (r.pid, r.idx, order[r.split]))
    images = np.stack([read_ppm(root / r.path) for r in records]) if records else \
        np.zeros((0, HEIGHT, WIDTH, 3), np.uint8)
    return Dataset(cfg, idents, records, images, caps, conts)
