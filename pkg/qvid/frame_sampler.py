#    ___   __     ___ ____
#   / _ \  \ \   / (_)  _ \
#  | | | |  \ \ / /| | | | |
#  | |_| |   \ V / | | |_| |
#   \__\_\   \_/  |_|____/
#
# Zero-shot video question answering from question-guided frame captions
# Copyright (C) 2024 QViD harness developers. All rights reserved
#
# QViD harness is free software: you can redistribute it and/or modify
# it under the terms of the GNU Affero General Public License as published by
# the Free Software Foundation, either version 3 of the License.
#
# QViD harness is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU Affero General Public License for more details.
#
# You should have received a copy of the GNU Affero General Public License
# along with QViD harness. If not, see <https://www.gnu.org/licenses/>.

import io
import logging
import math
import os
import subprocess
import tempfile

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from os import path
from typing import List, Optional, Sequence, Tuple

from deprecated import deprecated
from PIL import Image, UnidentifiedImageError

from qvid.core_types import Frame, QvidError, SourceKind, VideoRef


class EmptyVideo(QvidError):
    pass


class SourceError(QvidError):
    pass


IMAGE_EXTENSIONS = ('.jpg', '.jpeg', '.png', '.bmp', '.webp')

# Placeholders: {path} video file, {select} ffmpeg select filter, {out_pattern} sequential output names
DEFAULT_PROBE_CMD = ('ffprobe', '-v', 'error', '-select_streams', 'v:0', '-count_packets',
                     '-show_entries', 'stream=nb_read_packets', '-of', 'default=nokey=1:noprint_wrappers=1',
                     '{path}')
DEFAULT_FPS_CMD = ('ffprobe', '-v', 'error', '-select_streams', 'v:0',
                   '-show_entries', 'stream=r_frame_rate', '-of', 'default=nokey=1:noprint_wrappers=1',
                   '{path}')
DEFAULT_EXTRACT_CMD = ('ffmpeg', '-v', 'error', '-nostdin', '-i', '{path}', '-vf', '{select}',
                       '-vsync', '0', '-start_number', '0', '{out_pattern}')



class SamplingStrategy(Enum):
    CENTRE = 'centre'
    FLOOR = 'floor'


@dataclass(frozen=True)
class SamplerConfig:
    n_frames: int = 64
    strategy: SamplingStrategy = SamplingStrategy.CENTRE
    image_max_side: int = 384
    image_format: str = 'JPEG'
    jpeg_quality: int = 90
    frame_dir_fps: float = 3.0
    probe_cmd: Tuple[str, ...] = DEFAULT_PROBE_CMD
    fps_cmd: Tuple[str, ...] = DEFAULT_FPS_CMD
    extract_cmd: Tuple[str, ...] = DEFAULT_EXTRACT_CMD
    decoder_timeout: float = 600.0

    def __post_init__(self) -> None:
        if self.n_frames < 1:
            raise ValueError(f'n_frames must be >= 1, got {self.n_frames}')
        if self.image_max_side < 1:
            raise ValueError(f'image_max_side must be >= 1, got {self.image_max_side}')


def plan_indices(total_frames: int, n: int) -> List[int]:
    """
    Uniformly spaced source indices: the centre of each of n equal bins,
    floor((i + 0.5) * total_frames / n).

    Videos shorter than n frames give every frame once.
    """

    if total_frames < 1:
        raise EmptyVideo('Video has no frames')
    if n < 1:
        raise ValueError(f'Number of frames to sample must be >= 1, got {n}')

    if total_frames <= n:
        return list(range(total_frames))

    return [(2 * i + 1) * total_frames // (2 * n) for i in range(n)]


def _floor_indices(total_frames: int, n: int) -> List[int]:
    if total_frames < 1:
        raise EmptyVideo('Video has no frames')
    if n < 1:
        raise ValueError(f'Number of frames to sample must be >= 1, got {n}')
    if total_frames <= n:
        return list(range(total_frames))
    return [i * total_frames // n for i in range(n)]


@deprecated('Start-biased; use plan_indices (centre of bin) or the floor sampling strategy instead')
def plan_indices_floor(total_frames: int, n: int) -> List[int]:
    """Legacy floor(i * total_frames / n) sampling, kept for parity runs"""
    return _floor_indices(total_frames, n)


def clip_window(video: VideoRef, total_frames: int, fps: Optional[float]) -> Tuple[int, int]:
    """Source index window [lo, hi) covered by the annotated clip span of the video"""
    if not video.has_clip or not fps or fps <= 0:
        return 0, total_frames

    start = video.start_s if video.start_s is not None else 0.0
    end = video.end_s if video.end_s is not None else total_frames / fps
    if math.isnan(start) or math.isnan(end):
        return 0, total_frames
    if end < start:
        start, end = end, start

    lo = min(max(int(math.floor(start * fps)), 0), total_frames - 1)
    hi = max(min(int(math.ceil(end * fps)), total_frames), lo + 1)
    return lo, hi


def plan_for_video(video: VideoRef, total_frames: int, n: int, fps: Optional[float] = None,
                   strategy: SamplingStrategy = SamplingStrategy.CENTRE) -> List[int]:
    """Sampling plan of the given strategy inside the clip window of the video"""
    lo, hi = clip_window(video, total_frames, fps)
    plan = _floor_indices if strategy == SamplingStrategy.FLOOR else plan_indices
    return [lo + i for i in plan(hi - lo, n)]


def list_frame_files(frame_dir: str) -> List[str]:
    """Image files of a frame directory in strict lexicographic filename order"""
    names = [name for name in os.listdir(frame_dir)
             if name.lower().endswith(IMAGE_EXTENSIONS) and path.isfile(path.join(frame_dir, name))]
    return [path.join(frame_dir, name) for name in sorted(names)]


def _fill(template: Sequence[str], **values: str) -> List[str]:
    args = []
    for arg in template:
        for name, value in values.items():
            arg = arg.replace('{' + name + '}', value)
        args.append(arg)
    return args


def _run_tool(args: List[str], what: str, timeout: float) -> str:
    blog = logging.getLogger('qvidlog')
    blog.debug(f'Running {what}: {" ".join(args[:3])} ...')

    try:
        result = subprocess.run(args, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                                timeout=timeout, check=False)
    except FileNotFoundError as e:
        raise SourceError(f"Can't run {what}: {e}")
    except subprocess.TimeoutExpired:
        raise SourceError(f'{what} timed out after {timeout}s')

    if result.returncode != 0:
        diagnostic = result.stderr.decode('utf-8', 'replace').strip()
        raise SourceError(f'{what} failed with code {result.returncode}: {diagnostic}')

    return result.stdout.decode('utf-8', 'replace')


def probe(video: VideoRef, cfg: SamplerConfig = SamplerConfig()) -> int:
    """Number of frames of the video source"""
    blog = logging.getLogger('qvidlog')
    blog.debug(f'Probing video #{video.video_id} at {video.path}')

    if video.kind == SourceKind.FRAME_DIR:
        if not path.isdir(video.path):
            raise SourceError(f'Frame directory of video #{video.video_id} not found: {video.path}')
        total = len(list_frame_files(video.path))
    else:
        if not path.isfile(video.path):
            raise SourceError(f'Video file of video #{video.video_id} not found: {video.path}')
        output = _run_tool(_fill(cfg.probe_cmd, path=video.path), 'frame probe', cfg.decoder_timeout)
        try:
            total = int(output.strip().splitlines()[0])
        except (ValueError, IndexError):
            raise SourceError(f'Unexpected frame probe output for video #{video.video_id}: {output!r}')

    if total == 0:
        raise EmptyVideo(f'Video #{video.video_id} has no frames')

    return total


def probe_fps(video: VideoRef, cfg: SamplerConfig = SamplerConfig()) -> float:
    """Frame rate of the source; frame directories use the configured rate"""
    if video.fps:
        return video.fps
    if video.kind == SourceKind.FRAME_DIR:
        return cfg.frame_dir_fps

    output = _run_tool(_fill(cfg.fps_cmd, path=video.path), 'fps probe', cfg.decoder_timeout).strip()
    try:
        return float(Fraction(output.splitlines()[0]))
    except (ValueError, ZeroDivisionError, IndexError):
        raise SourceError(f'Unexpected fps probe output for video #{video.video_id}: {output!r}')


def encode_still(data: bytes, cfg: SamplerConfig) -> bytes:
    """
    Re-encode an image in cfg.image_format, downscaled to image_max_side keeping aspect.

    Unreadable or oversized images raise SourceError.
    """

    try:
        with Image.open(io.BytesIO(data)) as img:
            img = img.convert('RGB')
            img.thumbnail((cfg.image_max_side, cfg.image_max_side), Image.Resampling.BICUBIC)

            out = io.BytesIO()
            if cfg.image_format.upper() in ('JPEG', 'JPG'):
                img.save(out, format='JPEG', quality=cfg.jpeg_quality)
            else:
                img.save(out, format=cfg.image_format.upper())
            return out.getvalue()
    except (Image.DecompressionBombError, UnidentifiedImageError, OSError) as e:
        raise SourceError(f'{type(e).__name__}: {e}')


def _check_indices(video: VideoRef, indices: Sequence[int]) -> None:
    for prev, cur in zip(indices, indices[1:]):
        if cur <= prev:
            raise ValueError(f'Indices must be strictly increasing, got {prev} then {cur}')
    if indices and indices[0] < 0:
        raise ValueError(f'Negative frame index {indices[0]}')
    if indices and video.total_frames is not None and indices[-1] >= video.total_frames:
        raise ValueError(f'Frame index {indices[-1]} is beyond {video.total_frames} frames')


def _decode_frames(video: VideoRef, indices: Sequence[int], out_dir: str, cfg: SamplerConfig) -> None:
    """
    Decoder contract: one image per requested source index, named <index:06d>.png in out_dir.

    ffmpeg writes selected frames sequentially, so they are renamed afterwards.
    """

    select = 'select=' + '+'.join(f'eq(n\\,{i})' for i in indices)
    out_pattern = path.join(out_dir, 'seq-%06d.png')
    _run_tool(_fill(cfg.extract_cmd, path=video.path, select=select, out_pattern=out_pattern),
              'frame extraction', cfg.decoder_timeout)

    for position, index in enumerate(indices):
        produced = path.join(out_dir, f'seq-{position:06d}.png')
        if not path.isfile(produced):
            raise SourceError(f'Decoder produced no image for frame {index} of video #{video.video_id}')
        os.replace(produced, path.join(out_dir, f'{index:06d}.png'))


def _read_frame(file_path: str, video: VideoRef, index: int) -> bytes:
    try:
        with open(file_path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise SourceError(f"Can't read frame {index} of video #{video.video_id}: {e}")


def extract(video: VideoRef, indices: Sequence[int], cfg: SamplerConfig = SamplerConfig()) -> List[Frame]:
    """
    Extract and re-encode the frames at the given source indices.

    Returned Frame.index is the position in the list, Frame.source_index the planned index.
    """

    blog = logging.getLogger('qvidlog')
    indices = list(indices)
    _check_indices(video, indices)

    if not indices:
        return []

    blog.debug(f'Extracting {len(indices)} frames of video #{video.video_id}')

    with tempfile.TemporaryDirectory(prefix='qvid-frames-') as tmp_dir:
        if video.kind == SourceKind.FRAME_DIR:
            files = list_frame_files(video.path)
            sources = []
            for index in indices:
                if index >= len(files):
                    raise SourceError(f'Frame {index} of video #{video.video_id} does not exist')
                sources.append(files[index])
        else:
            _decode_frames(video, indices, tmp_dir, cfg)
            sources = [path.join(tmp_dir, f'{index:06d}.png') for index in indices]

        frames = []
        for position, (index, source) in enumerate(zip(indices, sources)):
            data = _read_frame(source, video, index)
            try:
                encoded = encode_still(data, cfg)
            except SourceError as e:
                raise SourceError(f"Can't decode frame {index} of video #{video.video_id}: {e}")
            frames.append(Frame(index=position, source_index=index, image_bytes=encoded))

    return frames
