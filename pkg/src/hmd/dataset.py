"""Movie containers, on-disk layout, and training-sample assembly.

A movie directory holds one PGM per frame and channel plus the ground
truth JSON:

    <dir>/
        frame_000_c0.pgm
        frame_000_c1.pgm
        ...
        gt.json
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .evaluation import (
    GroundTruth,
    load_ground_truth,
    point_in_polygon,
    polygon_centroid,
    polygon_interior_pixels,
    save_ground_truth,
)
from .forest import ClassLabel, TrainingSample, TrainingSet, TrainParams
from .image import MultiChannelImage, load_image, save_image
from .synth import SynthConfig, generate_sequence

_FRAME_RE = re.compile(r"frame_(\d+)_c(\d+)\.pgm$")


@dataclass
class Movie:
    movie_id: str
    frames: list[MultiChannelImage]
    gt: GroundTruth


def save_movie(movie: Movie, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f, image in enumerate(movie.frames):
        paths = [directory / f"frame_{f:03d}_c{ch}.pgm" for ch in range(image.channels)]
        save_image(image, paths)
    save_ground_truth(movie.gt, directory / "gt.json")


def load_movie(directory) -> Movie:
    directory = Path(directory)
    gt_path = directory / "gt.json"
    if not gt_path.exists():
        raise FileNotFoundError(f"{directory} has no gt.json")
    gt = load_ground_truth(gt_path)

    paths: dict[int, dict[int, Path]] = {}
    for path in directory.iterdir():
        m = _FRAME_RE.match(path.name)
        if m is None:
            continue
        paths.setdefault(int(m.group(1)), {})[int(m.group(2))] = path
    if not paths:
        raise FileNotFoundError(f"{directory} has no frame PGMs")

    frame_ids = sorted(paths)
    if frame_ids != list(range(len(frame_ids))):
        raise ValueError(f"{directory} frame numbers are not contiguous: {frame_ids}")
    frames = []
    for f in frame_ids:
        chans = paths[f]
        ch_ids = sorted(chans)
        if ch_ids != list(range(len(ch_ids))):
            raise ValueError(f"frame {f} channels are not contiguous: {ch_ids}")
        frames.append(load_image([chans[c] for c in ch_ids]))
    counts = {img.channels for img in frames}
    if len(counts) != 1:
        raise ValueError(f"{directory} mixes channel counts: {sorted(counts)}")
    return Movie(movie_id=gt.movie_id, frames=frames, gt=gt)


def generate_movies(count: int, config: SynthConfig, base_seed: int = 0) -> list[Movie]:
    """Render `count` independent movies with per-movie seeds spawned
    from base_seed; movie ids are m000, m001, ..."""
    if count < 1:
        raise ValueError("count must be >= 1")
    seeds = np.random.SeedSequence(base_seed).spawn(count)
    movies = []
    for i, ss in enumerate(seeds):
        seed = int(ss.generate_state(1, dtype=np.uint64)[0])
        cfg = replace(config, seed=seed)
        frames, gt = generate_sequence(cfg)
        gt.movie_id = f"m{i:03d}"
        movies.append(Movie(movie_id=gt.movie_id, frames=frames, gt=gt))
    return movies


def _pair_midpoint(contours) -> tuple[float, float]:
    centers = [polygon_centroid(c.polygon) for c in contours]
    return (
        sum(c[0] for c in centers) / len(centers),
        sum(c[1] for c in centers) / len(centers),
    )


def collect_training_samples(
    movies: list[Movie],
    params: TrainParams,
    seed: int = 0,
) -> TrainingSet:
    """Pixel samples for forest training.

    Every pixel inside a mother outline becomes a mother sample voting
    for that outline's centroid; every pixel inside a daughter outline
    becomes a daughter sample voting for the midpoint of its pair.
    Each annotated frame then gets bg_ratio times as many background
    pixels drawn uniformly outside all outlines.
    """
    rng = np.random.default_rng(seed)
    images: dict = {}
    samples: list[TrainingSample] = []
    fg_per_image: dict = {}

    for movie in movies:
        for event in movie.gt.events:
            mother = movie.gt.mother_contour(event)
            pair = movie.gt.daughter_pair_contours(event)
            if len(pair) != 2:
                raise ValueError(
                    f"event at frame {event.frame_t} of {movie.movie_id} has "
                    f"{len(pair)} daughter contours, expected 2"
                )

            m_img = (movie.movie_id, event.frame_t)
            images[m_img] = movie.frames[event.frame_t]
            mcx, mcy = polygon_centroid(mother.polygon)
            for x, y in polygon_interior_pixels(mother.polygon):
                samples.append(
                    TrainingSample(m_img, (x, y), ClassLabel.MOTHER, (mcx - x, mcy - y))
                )
                fg_per_image[m_img] = fg_per_image.get(m_img, 0) + 1

            d_img = (movie.movie_id, event.frame_t + 1)
            images[d_img] = movie.frames[event.frame_t + 1]
            mid_x, mid_y = _pair_midpoint(pair)
            for contour in pair:
                for x, y in polygon_interior_pixels(contour.polygon):
                    samples.append(
                        TrainingSample(
                            d_img, (x, y), ClassLabel.DAUGHTER, (mid_x - x, mid_y - y)
                        )
                    )
                    fg_per_image[d_img] = fg_per_image.get(d_img, 0) + 1

    by_movie = {m.movie_id: m for m in movies}
    for (movie_id, frame_id), fg_count in sorted(fg_per_image.items()):
        movie = by_movie[movie_id]
        image = movie.frames[frame_id]
        polygons = [c.polygon for c in movie.gt.frame(frame_id).contours]
        want = int(round(params.bg_ratio * fg_count))
        got = 0
        attempts = 0
        limit = 50 * max(want, 1)
        while got < want and attempts < limit:
            attempts += 1
            x = int(rng.integers(0, image.width))
            y = int(rng.integers(0, image.height))
            if any(point_in_polygon((x, y), p) for p in polygons):
                continue
            samples.append(
                TrainingSample((movie_id, frame_id), (x, y), ClassLabel.BACKGROUND)
            )
            got += 1
        if got < want:
            raise RuntimeError(
                f"could not draw {want} background pixels in "
                f"{movie_id} frame {frame_id}"
            )

    return TrainingSet(images=images, samples=samples)
