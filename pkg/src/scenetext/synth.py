"""Desk-scale synthetic corpus with controlled text layouts.

Renders vocabulary words onto procedural backgrounds in four layouts:

* ``horizontal`` - the word on one line, boxed tightly;
* ``vertical`` - characters stacked top-to-bottom in a single polygon;
* ``cross_line`` - the word split at a random interior point across two
  lines, each line annotated separately (no single annotation contains the
  whole word);
* ``partial`` - the word embedded in a longer line padded with 1-4 random
  vocabulary characters, annotated as the whole line.

Each image's content depends only on (seed, image index), so synthesis of
distinct images can run in parallel and reruns are reproducible.
"""

from __future__ import annotations

import importlib.util
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .manifest import (
    DatasetManifest,
    DatasetRecord,
    ImageRecord,
    Layout,
    TextAnnotation,
)

_FONT_CACHE: dict[tuple[str, int], ImageFont.FreeTypeFont] = {}


def find_default_font() -> str | None:
    """Locate a TrueType font with broad glyph coverage, if one is around."""
    candidates = []
    spec = importlib.util.find_spec("matplotlib")
    if spec is not None and spec.submodule_search_locations:
        mpl = Path(spec.submodule_search_locations[0])
        candidates.append(mpl / "mpl-data" / "fonts" / "ttf" / "DejaVuSans.ttf")
    candidates += [
        Path("/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf"),
        Path("/usr/share/fonts/TTF/DejaVuSans.ttf"),
    ]
    for cand in candidates:
        if cand.exists():
            return str(cand)
    return None


def _load_font(path: str | None, size: int) -> ImageFont.ImageFont:
    size = max(6, int(size))
    if path is None:
        return ImageFont.load_default(size=size)
    key = (path, size)
    if key not in _FONT_CACHE:
        _FONT_CACHE[key] = ImageFont.truetype(path, size=size)
    return _FONT_CACHE[key]


def _glyph_supported(font, ch: str) -> bool:
    if ch == " ":
        return True
    try:
        mask = font.getmask(ch)
    except Exception:
        return False
    if mask.size[0] == 0 or mask.size[1] == 0:
        return False
    try:
        tofu = font.getmask("￿")
    except Exception:
        return True
    return not (mask.size == tofu.size and bytes(mask) == bytes(tofu))


def font_covers_word(font, word: str) -> bool:
    return all(_glyph_supported(font, ch) for ch in word)


def random_vocab(n_words: int, seed: int, length_range: tuple[int, int] = (4, 7)) -> list[str]:
    """Distinct lowercase words, none of which is a substring of another.

    The substring-freedom keeps query relevance exact: an image is relevant
    for a word iff that word was deliberately rendered there.
    """
    rng = np.random.default_rng(seed)
    letters = "abcdefghijklmnopqrstuvwxyz"
    words: list[str] = []
    attempts = 0
    while len(words) < n_words:
        attempts += 1
        if attempts > 100 * n_words:
            raise RuntimeError("could not generate a substring-free vocabulary")
        length = int(rng.integers(length_range[0], length_range[1] + 1))
        word = "".join(letters[i] for i in rng.integers(0, 26, size=length))
        if any(word in w or w in word for w in words):
            continue
        words.append(word)
    return words


@dataclass
class _RenderJob:
    word: str
    layout: Layout
    rng: np.random.Generator


def _background(rng: np.random.Generator, size: int, dark: bool) -> np.ndarray:
    base = rng.integers(20, 80) if dark else rng.integers(175, 235)
    style = rng.integers(0, 3)
    canvas = np.full((size, size, 3), base, dtype=np.float64)
    if style == 0:
        canvas += rng.normal(0, 6, size=(size, size, 3))
    elif style == 1:
        ramp = np.linspace(-18, 18, size)
        axis = ramp[None, :, None] if rng.random() < 0.5 else ramp[:, None, None]
        canvas = canvas + axis + rng.normal(0, 3, size=(size, size, 3))
    else:
        tint = rng.integers(-12, 13, size=3)
        canvas = canvas + tint[None, None, :] + rng.normal(0, 4, size=(size, size, 3))
    return np.clip(canvas, 0, 255).astype(np.uint8)


def _text_color(rng: np.random.Generator, dark_background: bool) -> tuple[int, int, int]:
    base = rng.integers(190, 250) if dark_background else rng.integers(5, 60)
    jitter = rng.integers(-12, 13, size=3)
    return tuple(int(np.clip(base + j, 0, 255)) for j in jitter)


def _fitted_font(font_path: str | None, text: str, target_width: float) -> ImageFont.ImageFont:
    probe = _load_font(font_path, 48)
    try:
        width_at_48 = max(probe.getlength(text), 1.0)
    except AttributeError:  # bitmap fallback font
        width_at_48 = max(len(text) * 24, 1)
    size = int(48 * target_width / width_at_48)
    font = _load_font(font_path, size)
    while size > 7 and font.getlength(text) > target_width * 1.15:
        size -= 1
        font = _load_font(font_path, size)
    return font


def _pad_box(box: tuple[float, float, float, float], pad: float, size: int):
    x0, y0, x1, y1 = box
    return (
        max(0.0, x0 - pad),
        max(0.0, y0 - pad),
        min(float(size), x1 + pad),
        min(float(size), y1 + pad),
    )


def _boxes_overlap(a, b) -> bool:
    return not (a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1])


def _place(rng, size, box_w, box_h, taken, tries=20):
    """Random top-left for a box avoiding existing boxes; None if crowded."""
    box_w, box_h = min(box_w, size - 2), min(box_h, size - 2)
    for _ in range(tries):
        x = float(rng.integers(1, max(2, int(size - box_w))))
        y = float(rng.integers(1, max(2, int(size - box_h))))
        cand = (x, y, x + box_w, y + box_h)
        if not any(_boxes_overlap(cand, t) for t in taken):
            return x, y
    return None


def _rect_polygon(box) -> tuple[tuple[float, float], ...]:
    x0, y0, x1, y1 = box
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


def _draw_line(draw, xy, text, font, color):
    draw.text(xy, text, font=font, fill=color)
    return draw.textbbox(xy, text, font=font)


def _render_image(
    job: _RenderJob,
    image_id: str,
    size: int,
    font_path: str | None,
    vocab: list[str],
    charset: str,
    filler_prob: float,
) -> DatasetRecord:
    rng = job.rng
    dark = bool(rng.random() < 0.35)
    pixels = _background(rng, size, dark)
    img = Image.fromarray(pixels)
    draw = ImageDraw.Draw(img)
    color = _text_color(rng, dark)
    annotations: list[TextAnnotation] = []
    taken: list[tuple[float, float, float, float]] = []

    word = job.word
    if job.layout is Layout.HORIZONTAL:
        target = size * rng.uniform(0.45, 0.8)
        font = _fitted_font(font_path, word, target)
        w = font.getlength(word)
        h = font.size * 1.3
        pos = _place(rng, size, w, h, taken) or (2.0, 2.0)
        box = _draw_line(draw, pos, word, font, color)
        annotations.append(TextAnnotation(_rect_polygon(_pad_box(box, 1.5, size)), word))
        taken.append(_pad_box(box, 3, size))
    elif job.layout is Layout.VERTICAL:
        char_h = min(size * 0.8 / len(word) - 2, size * 0.3)
        font = _load_font(font_path, int(char_h))
        col_w = max(font.getlength(ch) for ch in word)
        total_h = len(word) * (font.size + 2)
        pos = _place(rng, size, col_w, total_h, taken) or (2.0, 2.0)
        x, y = pos
        boxes = []
        for ch in word:
            boxes.append(_draw_line(draw, (x, y), ch, font, color))
            y += font.size + 2
        union = (
            min(b[0] for b in boxes),
            min(b[1] for b in boxes),
            max(b[2] for b in boxes),
            max(b[3] for b in boxes),
        )
        annotations.append(TextAnnotation(_rect_polygon(_pad_box(union, 1.5, size)), word))
        taken.append(_pad_box(union, 3, size))
    elif job.layout is Layout.CROSS_LINE:
        split = int(rng.integers(1, len(word)))
        part1, part2 = word[:split], word[split:]
        longer = max(part1, part2, key=len)
        target = size * rng.uniform(0.35, 0.6)
        font = _fitted_font(font_path, longer, target)
        line_h = font.size + 3
        block_w = max(font.getlength(part1), font.getlength(part2))
        pos = _place(rng, size, block_w, 2 * line_h + 4, taken) or (2.0, 2.0)
        x, y = pos
        x2 = x + float(rng.integers(0, max(1, int(font.size * 0.6))))
        box1 = _draw_line(draw, (x, y), part1, font, color)
        box2 = _draw_line(draw, (x2, y + line_h), part2, font, color)
        annotations.append(TextAnnotation(_rect_polygon(_pad_box(box1, 1.5, size)), part1))
        annotations.append(TextAnnotation(_rect_polygon(_pad_box(box2, 1.5, size)), part2))
        taken.append(_pad_box((min(box1[0], box2[0]), box1[1], max(box1[2], box2[2]), box2[3]), 3, size))
    elif job.layout is Layout.PARTIAL:
        for _ in range(20):
            n_pad = int(rng.integers(1, 5))
            left_n = int(rng.integers(0, n_pad + 1))
            pads = "".join(charset[i] for i in rng.integers(0, len(charset), size=n_pad))
            line = pads[:left_n] + word + pads[left_n:]
            clean = not any(v != word and v in line for v in vocab)
            if clean and line != word:
                break
        target = size * rng.uniform(0.55, 0.85)
        font = _fitted_font(font_path, line, target)
        w = font.getlength(line)
        pos = _place(rng, size, w, font.size * 1.3, taken) or (2.0, 2.0)
        box = _draw_line(draw, pos, line, font, color)
        annotations.append(TextAnnotation(_rect_polygon(_pad_box(box, 1.5, size)), line))
        taken.append(_pad_box(box, 3, size))
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unknown layout {job.layout}")

    if rng.random() < filler_prob:
        for _ in range(10):
            n = int(rng.integers(2, 5))
            filler = "".join(charset[i] for i in rng.integers(0, len(charset), size=n))
            if not any(v in filler for v in vocab):
                break
        else:
            filler = None
        if filler:
            font = _fitted_font(font_path, filler, size * rng.uniform(0.2, 0.35))
            pos = _place(rng, size, font.getlength(filler), font.size * 1.3, taken, tries=10)
            if pos is not None:
                box = _draw_line(draw, pos, filler, font, color)
                annotations.append(TextAnnotation(_rect_polygon(_pad_box(box, 1.5, size)), filler))

    record = ImageRecord(id=image_id, width=size, height=size, pixels=np.asarray(img))
    return DatasetRecord(image=record, annotations=annotations, layout=job.layout)


def _normalize_mix(layout_mix) -> dict[Layout, float]:
    mix = {}
    for key, frac in layout_mix.items():
        layout = key if isinstance(key, Layout) else Layout(str(key))
        mix[layout] = float(frac)
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"layout fractions must sum to 1, got {total}")
    if any(f < 0 for f in mix.values()):
        raise ValueError("layout fractions must be non-negative")
    return mix


def _allocate_layouts(mix: dict[Layout, float], n: int, rng: np.random.Generator) -> list[Layout]:
    layouts = sorted(mix.keys(), key=lambda l: l.value)
    counts = {l: int(np.floor(mix[l] * n)) for l in layouts}
    remainder = n - sum(counts.values())
    by_frac = sorted(layouts, key=lambda l: (-(mix[l] * n - np.floor(mix[l] * n)), l.value))
    for l in by_frac[:remainder]:
        counts[l] += 1
    assignment = [l for l in layouts for _ in range(counts[l])]
    return [assignment[i] for i in rng.permutation(n)]


def synthesize_corpus(
    vocab: list[str],
    n_images: int,
    layout_mix: dict,
    seed: int,
    *,
    image_size: int = 128,
    font_path: str | None = None,
    filler_prob: float = 0.0,
) -> DatasetManifest:
    """Generate a multi-layout corpus; deterministic in all arguments."""
    if not vocab:
        raise ValueError("vocabulary must be non-empty")
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    mix = _normalize_mix(layout_mix)

    if font_path is None:
        font_path = find_default_font()
    probe_font = _load_font(font_path, 24)
    usable = []
    for word in vocab:
        if not font_covers_word(probe_font, word):
            warnings.warn(f"font cannot render {word!r}; word skipped")
            continue
        usable.append(word)
    if not usable:
        raise ValueError("no vocabulary word is renderable with the configured font")
    if mix.get(Layout.CROSS_LINE, 0) > 0 and any(len(w) < 2 for w in usable):
        raise ValueError("cross-line layout requires vocabulary words of length >= 2")

    master = np.random.default_rng(seed)
    word_order = master.permutation(len(usable))
    words = [usable[word_order[i % len(usable)]] for i in range(n_images)]
    shuffle = master.permutation(n_images)
    words = [words[i] for i in shuffle]
    layouts = _allocate_layouts(mix, n_images, master)
    charset = sorted(set("".join(usable)))

    records = []
    queries: dict[str, set[str]] = {w: set() for w in usable}
    for i in range(n_images):
        image_id = f"img_{i:05d}"
        job = _RenderJob(word=words[i], layout=layouts[i], rng=np.random.default_rng([seed, i]))
        records.append(
            _render_image(job, image_id, image_size, font_path, usable, "".join(charset), filler_prob)
        )
        queries[words[i]].add(image_id)

    return DatasetManifest(records=records, queries=queries)
