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
import json
import logging
import math
import os
import random
import re

from dataclasses import dataclass
from enum import Enum
from os import path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from PIL import Image

from qvid.core_types import MAX_OPTIONS, OutOfRange, QARecord, QvidError, SourceKind, VideoRef


class ValidationError(QvidError):
    """Dataset file problems; problems lists every offending line/record"""

    def __init__(self, source: str, problems: List[str]) -> None:
        self.source = source
        self.problems = problems
        shown = '; '.join(problems[:10])
        more = f' (and {len(problems) - 10} more)' if len(problems) > 10 else ''
        super().__init__(f'{source}: {len(problems)} problems: {shown}{more}')


class Split(Enum):
    TRAIN = 'train'
    VAL = 'val'
    TEST = 'test'


VARIABLE = 'variable'


@dataclass(frozen=True)
class NormalizedDataset:
    records: List[QARecord]
    dataset_name: str
    split: Split = Split.VAL
    option_count_mode: Union[int, str] = VARIABLE
    source_path: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    def by_id(self) -> Dict[str, QARecord]:
        return {r.record_id: r for r in self.records}

    @property
    def question_types(self) -> List[str]:
        """Question types in order of first appearance"""
        seen = []
        for record in self.records:
            if record.question_type is not None and record.question_type not in seen:
                seen.append(record.question_type)
        return seen


def option_count_mode(records: Sequence[QARecord]) -> Union[int, str]:
    counts = {r.m for r in records}
    return counts.pop() if len(counts) == 1 else VARIABLE


def _relative(file_path: str, media_root: Optional[str]) -> str:
    if media_root is None or not path.isabs(file_path):
        return file_path
    rel = path.relpath(file_path, media_root)
    return file_path if rel.startswith('..') else rel.replace(os.sep, '/')


def record_to_json(record: QARecord, media_root: Optional[str] = None) -> Dict[str, Any]:
    video = record.video
    obj = {
        'record_id': record.record_id,
        'dataset': record.dataset,
        'video_id': video.video_id,
        'video': {
            'kind': video.kind.value,
            'path': _relative(video.path, media_root),
            'start_s': video.start_s,
            'end_s': video.end_s
        },
        'question': record.question,
        'options': list(record.options),
        'gold_index': record.gold_index,
        'question_type': record.question_type
    }
    if video.fps is not None:
        obj['video']['fps'] = video.fps
    return obj


def _optional_float(value: Any, name: str) -> Optional[float]:
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f'"{name}" must be a number or null')
    return float(value)


def record_from_json(obj: Any, media_root: Optional[str] = None) -> QARecord:
    """QARecord from one normalized line; ValueError/KeyError/QvidError on bad input"""
    if not isinstance(obj, dict):
        raise ValueError('line is not a JSON object')

    video_obj = obj['video']
    if not isinstance(video_obj, dict):
        raise ValueError('"video" is not an object')

    video_path = video_obj['path']
    if not isinstance(video_path, str) or not video_path:
        raise ValueError('"video.path" must be a non-empty string')
    if media_root is not None and not path.isabs(video_path):
        video_path = path.join(media_root, video_path)

    options = obj['options']
    if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
        raise ValueError('"options" must be a list of strings')

    gold_index = obj.get('gold_index')
    if gold_index is not None and (isinstance(gold_index, bool) or not isinstance(gold_index, int)):
        raise ValueError('"gold_index" must be an integer or null')

    question = obj['question']
    if not isinstance(question, str):
        raise ValueError('"question" must be a string')

    video = VideoRef(
        video_id=str(obj['video_id']),
        kind=SourceKind(video_obj['kind']),
        path=video_path,
        start_s=_optional_float(video_obj.get('start_s'), 'video.start_s'),
        end_s=_optional_float(video_obj.get('end_s'), 'video.end_s'),
        fps=_optional_float(video_obj.get('fps'), 'video.fps')
    )

    return QARecord(
        record_id=str(obj['record_id']),
        video=video,
        question=question,
        options=tuple(options),
        gold_index=gold_index,
        question_type=obj.get('question_type'),
        dataset=obj.get('dataset') or ''
    )


def _media_exists(video: VideoRef) -> bool:
    if video.kind == SourceKind.FRAME_DIR:
        return path.isdir(video.path)
    return path.isfile(video.path)


def load_normalized(file_path: str, media_root: Optional[str] = None, split: Union[Split, str] = Split.VAL,
                    check_media: bool = True) -> NormalizedDataset:
    """
    Read and validate a normalized JSONL dataset.

    Relative video paths are resolved under media_root (default: directory of the file).
    Every problem found is collected; if there are any, ValidationError lists them all.
    """

    blog = logging.getLogger('qvidlog')
    blog.info(f'Loading dataset {file_path}')

    if media_root is None:
        media_root = path.dirname(path.abspath(file_path))

    records: List[QARecord] = []
    problems: List[str] = []
    seen: Dict[str, int] = {}

    with open(file_path, 'r', encoding='utf-8') as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = record_from_json(json.loads(line), media_root)
            except KeyError as e:
                problems.append(f'line {n}: missing field {e}')
                continue
            except (ValueError, QvidError) as e:
                problems.append(f'line {n}: {e}')
                continue

            if record.record_id in seen:
                problems.append(f'line {n}: duplicate record #{record.record_id} (first on line {seen[record.record_id]})')
                continue
            seen[record.record_id] = n

            if check_media and not _media_exists(record.video):
                problems.append(f'line {n}: media of record #{record.record_id} not found: {record.video.path}')
                continue

            records.append(record)

    if not records and not problems:
        problems.append('no records')

    if problems:
        blog.error(f'Dataset {file_path} has {len(problems)} problems')
        raise ValidationError(file_path, problems)

    names = [r.dataset for r in records if r.dataset]
    dataset_name = names[0] if names else path.splitext(path.basename(file_path))[0]

    dataset = NormalizedDataset(records, dataset_name, Split(split), option_count_mode(records),
                                path.abspath(file_path))
    blog.info(f'Loaded {len(records)} records of {dataset_name} ({dataset.split.value})')
    return dataset


def write_normalized(records: Iterable[QARecord], file_path: str, media_root: Optional[str] = None) -> int:
    """Write records as normalized JSONL (UTF-8, LF); returns the number of records"""
    n = 0
    with open(file_path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record_to_json(record, media_root), ensure_ascii=False) + '\n')
            n += 1
    return n


SENTINEL_RE = re.compile(r'#q\d+-\d{5}#')

SYNTHETIC_TYPES = ('Temporal', 'Causal', 'Descriptive')

SYNTHETIC_SUBJECTS = ('the boy', 'the girl', 'the dog', 'the man', 'the woman', 'the cat', 'the baby')
SYNTHETIC_ACTIONS = ('run', 'jump', 'sit down', 'pick up the ball', 'wave', 'laugh', 'turn around', 'eat')
SYNTHETIC_OBJECTS = ('a red ball', 'a blue car', 'a green chair', 'a yellow kite', 'a white cup',
                     'a brown box', 'a black bag', 'an orange book', 'a pink hat', 'a grey phone')

FRAME_SIZE = (32, 24)


def sentinel_for(seed: int, i: int) -> str:
    return f'#q{seed}-{i:05d}#'


def find_sentinel(record: QARecord) -> Optional[str]:
    for option in record.options:
        match = SENTINEL_RE.search(option)
        if match:
            return match.group(0)
    return None


def _solid_jpeg(color: tuple) -> bytes:
    out = io.BytesIO()
    Image.new('RGB', FRAME_SIZE, color).save(out, format='JPEG', quality=90)
    return out.getvalue()


def synthesize_fixture(out_dir: str, n_records: int, m: Union[int, Sequence[int]] = 4, seed: int = 7,
                       dataset_name: str = 'synthetic', min_frames: int = 3,
                       max_frames: int = 10) -> NormalizedDataset:
    """
    Deterministic synthetic dataset: out_dir/dataset.jsonl plus one frame directory of
    solid-colour JPEGs per record under out_dir/media.

    m may be a sequence; record i gets m[i % len(m)] options. Option A of every record
    carries a sentinel '#q<seed>-<i>#' that rig_answers keys on.
    """

    counts = [m] if isinstance(m, int) else list(m)
    if n_records < 1:
        raise ValueError(f'n_records must be >= 1, got {n_records}')
    if not counts:
        raise ValueError('At least one option count is needed')
    for count in counts:
        if not 2 <= count <= MAX_OPTIONS:
            raise OutOfRange(f'Option count {count} is out of range 2..{MAX_OPTIONS}')

    rng = random.Random(seed)
    media_root = path.join(out_dir, 'media')
    os.makedirs(media_root, exist_ok=True)

    records = []
    for i in range(n_records):
        video_id = f'syn{seed}-v{i:05d}'
        frame_dir = path.join(media_root, video_id)
        os.makedirs(frame_dir, exist_ok=True)
        for j in range(rng.randint(min_frames, max_frames)):
            color = (rng.randrange(256), rng.randrange(256), rng.randrange(256))
            with open(path.join(frame_dir, f'{j:05d}.jpg'), 'wb') as f:
                f.write(_solid_jpeg(color))

        n_options = counts[i % len(counts)]
        subject = rng.choice(SYNTHETIC_SUBJECTS)
        question = f'What does {subject} do after the {rng.choice(SYNTHETIC_ACTIONS)} scene?'
        picks = rng.sample(SYNTHETIC_OBJECTS * math.ceil(n_options / len(SYNTHETIC_OBJECTS)), n_options)
        options = [f'{subject} takes {obj}' for obj in picks]
        options[0] = f'{options[0]} {sentinel_for(seed, i)}'

        records.append(QARecord(
            record_id=f'syn{seed}-{i:05d}',
            video=VideoRef(video_id, SourceKind.FRAME_DIR, frame_dir),
            question=question,
            options=tuple(options),
            gold_index=rng.randrange(n_options),
            question_type=SYNTHETIC_TYPES[i % len(SYNTHETIC_TYPES)],
            dataset=dataset_name
        ))

    dataset_path = path.join(out_dir, 'dataset.jsonl')
    write_normalized(records, dataset_path, out_dir)

    logging.getLogger('qvidlog').info(f'Synthesized {n_records} records into {dataset_path}')
    return NormalizedDataset(records, dataset_name, Split.VAL, option_count_mode(records),
                             path.abspath(dataset_path))
