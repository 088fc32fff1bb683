"""Fragment records, manifests, evaluation splits and a synthetic corpus."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .preprocessing import RasterImage, read_image, write_image

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("fragment_id", "writer_id", "page_id", "image_path")

# Writer-disjoint folds for PapyRow retrieval; counts are reference metadata only.
PAPYROW_FOLDS = [
    ["Aparhasios", "Ieremias", "Konstantinos", "Kyros", "Philotheos"],
    ["Amais", "Dios", "Hermauos", "Kollouthos", "Menas"],
    ["Daueit", "Dioscorus", "Theodosius", "Pilatos", "Victor"],
    ["Abraamios", "Andreas", "Anouphis", "Isak", "Psates"],
]
PAPYROW_FOLD_FRAGMENTS = [1694, 1619, 1599, 1586]


@dataclass
class FragmentRecord:
    fragment_id: str
    writer_id: str
    page_id: str
    image_path: str | None = None
    image: RasterImage | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("fragment_id", "writer_id", "page_id"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value.strip():
                raise DataError(f"{name} must be a non-empty string, got {value!r}")
            if "\t" in value or "\n" in value:
                raise DataError(f"{name} {value!r} contains a tab or newline")

    def load_image(self, root=None) -> RasterImage:
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise DataError(f"fragment {self.fragment_id} has neither pixels nor an image path")
        path = Path(self.image_path)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        return read_image(path)


@dataclass
class SplitSpec:
    kind: str
    assignments: dict[str, str]
    name: str = ""
    meta: dict = field(default_factory=dict)

    def records(self, records: list[FragmentRecord], part: str) -> list[FragmentRecord]:
        return [r for r in records if self.assignments.get(r.fragment_id) == part]

    @property
    def parts(self) -> list[str]:
        return sorted(set(self.assignments.values()))


def validate_records(records: list[FragmentRecord]) -> None:
    seen: set[str] = set()
    for r in records:
        if r.fragment_id in seen:
            raise DataError(f"duplicate fragment_id {r.fragment_id!r}")
        seen.add(r.fragment_id)


# -- manifests --------------------------------------------------------------------


def load_manifest(path, strict: bool = False, check_images: bool = True, skipped: list | None = None):
    """Read a tab-separated manifest with header ``fragment_id writer_id page_id image_path``.

    Records whose image is missing are skipped with a warning (appended to
    ``skipped`` when given); ``strict=True`` turns that into an error. Image
    paths stay relative to the manifest directory.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        return []
    header = tuple(lines[0].split("\t"))
    if header != MANIFEST_COLUMNS:
        raise DataError(f"{path}: manifest header must be {MANIFEST_COLUMNS}, got {header}")
    root = path.parent
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}")
        rec = FragmentRecord(*cols)
        if check_images and not (root / rec.image_path).is_file():
            msg = f"{path}:{lineno}: image {rec.image_path} for fragment {rec.fragment_id} is missing"
            if strict:
                raise DataError(msg)
            log.warning(msg)
            if skipped is not None:
                skipped.append(msg)
            continue
        records.append(rec)
    validate_records(records)
    return records


def write_manifest(path, records: list[FragmentRecord]) -> None:
    validate_records(records)
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for r in records:
        if r.image_path is None:
            raise DataError(f"fragment {r.fragment_id} has no image path to write")
        lines.append("\t".join((r.fragment_id, r.writer_id, r.page_id, r.image_path)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- splits -----------------------------------------------------------------------


def canonical_writer(name: str, known: set[str]) -> str | None:
    """Map aliases such as ``Kyros2`` or ``Victor3`` to a known base name."""
    if name in known:
        return name
    base = re.sub(r"[\s_-]*\d+$", "", name)
    return base if base in known else None


def make_kfold_splits(records: list[FragmentRecord], folds: list[list[str]] = PAPYROW_FOLDS) -> list[SplitSpec]:
    """One split per fold: that fold's writers train, the remaining folds test."""
    known: dict[str, int] = {}
    for i, names in enumerate(folds):
        for n in names:
            if n in known:
                raise ConfigError(f"writer {n!r} listed in folds {known[n] + 1} and {i + 1}")
            known[n] = i
    fold_of: dict[str, int] = {}
    unmatched = set()
    for r in records:
        base = canonical_writer(r.writer_id, set(known))
        if base is None:
            unmatched.add(r.writer_id)
        else:
            fold_of[r.writer_id] = known[base]
    if unmatched:
        raise DataError(f"writers not covered by any fold: {sorted(unmatched)}")
    splits = []
    for i in range(len(folds)):
        assignments = {r.fragment_id: "train" if fold_of[r.writer_id] == i else "test" for r in records}
        train_w = {r.writer_id for r in records if assignments[r.fragment_id] == "train"}
        test_w = {r.writer_id for r in records if assignments[r.fragment_id] == "test"}
        assert not train_w & test_w
        meta = {"fold": i + 1, "train_writers": sorted(folds[i])}
        if folds is PAPYROW_FOLDS:
            meta["reference_fragments"] = PAPYROW_FOLD_FRAGMENTS[i]
        splits.append(SplitSpec("kfold_writer_disjoint", assignments, name=f"fold{i + 1}", meta=meta))
    return splits


def largest_remainder(total: int, fractions) -> list[int]:
    quotas = [total * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    rest = total - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


def make_identification_split(
    records: list[FragmentRecord], fractions=(0.3, 0.2, 0.5), seed: int = 0
) -> SplitSpec:
    """Per writer, partition pages into train/val/test; every fragment follows its page."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    parts = ("train", "val", "test")
    rng = np.random.default_rng(seed)
    pages_by_writer: dict[str, list[str]] = {}
    for r in records:
        pages = pages_by_writer.setdefault(r.writer_id, [])
        if r.page_id not in pages:
            pages.append(r.page_id)
    page_part: dict[tuple[str, str], str] = {}
    warnings = []
    for writer in sorted(pages_by_writer):
        pages = sorted(pages_by_writer[writer])
        if len(pages) == 1:
            msg = f"writer {writer} has a single page; it goes to train"
            log.warning(msg)
            warnings.append(msg)
            page_part[(writer, pages[0])] = "train"
            continue
        counts = largest_remainder(len(pages), fractions)
        if len(pages) >= 3:
            for i in range(3):
                if counts[i] == 0 and fractions[i] > 0:
                    donor = int(np.argmax(counts))
                    counts[donor] -= 1
                    counts[i] += 1
        shuffled = [pages[i] for i in rng.permutation(len(pages))]
        start = 0
        for part, c in zip(parts, counts):
            for p in shuffled[start : start + c]:
                page_part[(writer, p)] = part
            start += c
    assignments = {r.fragment_id: page_part[(r.writer_id, r.page_id)] for r in records}
    meta = {"seed": seed, "fractions": list(fractions), "warnings": warnings}
    return SplitSpec("page_identification", assignments, name=f"ident_seed{seed}", meta=meta)


# -- synthetic corpus -------------------------------------------------------------------


@dataclass
class WriterStyle:
    ink: np.ndarray
    thickness: float
    slant: float
    spacing: float
    glyphs: list[np.ndarray]
    noise: float
    background: np.ndarray


def _writer_style(seed: int, writer: int, num_writers: int) -> WriterStyle:
    rng = np.random.default_rng([seed, 1, writer])
    # spread hues evenly so writers differ in ink colour as well as shape
    hue = (writer / num_writers + rng.uniform(0, 0.5 / num_writers)) % 1.0
    angle = 2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3]))
    ink = 70 + 60 * np.cos(angle)
    glyphs = []
    for _ in range(6):
        pts = rng.uniform(0, 1, size=(rng.integers(3, 5), 2))
        glyphs.append(pts)
    return WriterStyle(
        ink=ink,
        thickness=1.0 + 2.2 * (writer % 4) / 3 + rng.uniform(0, 0.3),
        slant=rng.uniform(-0.6, 0.6),
        spacing=rng.uniform(0.9, 1.6),
        glyphs=glyphs,
        noise=rng.uniform(2, 10),
        background=220 + 30 * np.cos(angle + np.pi),
    )


def _draw_segment(canvas_mask: np.ndarray, p0, p1, radius: float) -> None:
    h, w = canvas_mask.shape
    y_lo = int(max(0, np.floor(min(p0[0], p1[0]) - radius - 1)))
    y_hi = int(min(h, np.ceil(max(p0[0], p1[0]) + radius + 2)))
    x_lo = int(max(0, np.floor(min(p0[1], p1[1]) - radius - 1)))
    x_hi = int(min(w, np.ceil(max(p0[1], p1[1]) + radius + 2)))
    if y_lo >= y_hi or x_lo >= x_hi:
        return
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi].astype(np.float64)
    d = np.asarray(p1, dtype=np.float64) - np.asarray(p0, dtype=np.float64)
    L2 = float(d @ d)
    if L2 == 0:
        t = np.zeros_like(yy)
    else:
        t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / L2, 0, 1)
    dist2 = (yy - (p0[0] + t * d[0])) ** 2 + (xx - (p0[1] + t * d[1])) ** 2
    canvas_mask[y_lo:y_hi, x_lo:x_hi] |= dist2 <= radius * radius


def render_page(style: WriterStyle, rng: np.random.Generator, height: int, width: int, line_height: float):
    """Render text lines of ``style``'s glyphs on a tinted background (RGB uint8)."""
    tint = style.background + rng.uniform(-4, 4, size=3)
    bg = np.ones((height, width, 3)) * tint
    bg += rng.normal(0, style.noise, size=(height, width, 1))
    mask = np.zeros((height, width), dtype=bool)
    glyph_h = 0.55 * line_height
    glyph_w = glyph_h * 0.7
    y = 0.25 * line_height
    while y + glyph_h < height:
        x = rng.uniform(0, glyph_w)
        while x + glyph_w < width:
            g = style.glyphs[rng.integers(len(style.glyphs))]
            pts = np.empty_like(g)
            pts[:, 0] = y + g[:, 0] * glyph_h
            pts[:, 1] = x + g[:, 1] * glyph_w + style.slant * (1 - g[:, 0]) * glyph_h
            for a, b in zip(pts[:-1], pts[1:]):
                _draw_segment(mask, a, b, style.thickness / 2)
            x += glyph_w * style.spacing
        y += line_height
    img = np.where(mask[..., None], style.ink[None, None, :], bg)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate_synthetic_corpus(
    num_writers: int,
    pages_per_writer: int,
    fragments_per_page: int,
    seed: int = 0,
    fragment_size: tuple[int, int] = (64, 64),
) -> list[FragmentRecord]:
    """Pseudo-handwriting fragments with per-writer style and per-page background.

    Each writer gets its own ink colour, stroke thickness, slant, glyph set,
    spacing and noise level; each page its own background tint. Fragments
    are jittered crops of the rendered page. Deterministic in ``seed``.
    """
    for name, v in (("num_writers", num_writers), ("pages_per_writer", pages_per_writer),
                    ("fragments_per_page", fragments_per_page)):
        if int(v) < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")
    fh, fw = fragment_size
    page_h, page_w = int(fh * 1.5), int(fw * 2)
    records = []
    for w in range(num_writers):
        style = _writer_style(seed, w, num_writers)
        for p in range(pages_per_writer):
            rng = np.random.default_rng([seed, 2, w, p])
            page = render_page(style, rng, page_h, page_w, line_height=fh / 2.5)
            for f in range(fragments_per_page):
                y0 = int(rng.integers(0, page_h - fh + 1))
                x0 = int(rng.integers(0, page_w - fw + 1))
                crop = page[y0 : y0 + fh, x0 : x0 + fw]
                wid, pid = f"w{w:03d}", f"w{w:03d}_p{p:02d}"
                records.append(FragmentRecord(f"{pid}_f{f:02d}", wid, pid, None, RasterImage(crop.copy())))
    return records


def write_corpus(records: list[FragmentRecord], out_dir, fmt: str = "ppm") -> Path:
    """Write images plus ``manifest.tsv`` into ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    written = []
    for r in records:
        rel = f"images/{r.fragment_id}.{fmt}"
        write_image(out / rel, r.load_image())
        written.append(FragmentRecord(r.fragment_id, r.writer_id, r.page_id, rel))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, written)
    return manifest


def label_indices(values: list[str]) -> tuple[np.ndarray, list[str]]:
    """Map string labels to contiguous ints (sorted order)."""
    names = sorted(set(values))
    lookup = {n: i for i, n in enumerate(names)}
    return np.array([lookup[v] for v in values], dtype=np.int64), names


def load_images(records: list[FragmentRecord], height: int, width: int, root=None, binarize=None,
                pad_value: int = 255, mean=None, std=None, dtype=np.float32) -> np.ndarray:
    """Letterbox every record's image to ``height`` x ``width`` and stack as N x 3 x H x W."""
    from .preprocessing import resize_letterbox, to_model_tensor

    out = np.empty((len(records), 3, height, width), dtype=dtype)
    for i, r in enumerate(records):
        img = r.load_image(root)
        if binarize is not None:
            img = binarize(img)
        if (img.height, img.width) != (height, width):
            img = resize_letterbox(img, height, width, pad_value)
        out[i] = to_model_tensor(img, height, width, mean, std, dtype).data
    return out
