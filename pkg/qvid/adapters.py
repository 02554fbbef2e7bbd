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

import csv
import json
import logging
import math
import os

from collections import Counter
from dataclasses import dataclass, field
from os import path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

from qvid.core_types import InvalidRecord, OutOfRange, QARecord, QvidError, SourceKind, VideoRef
from qvid.datasets import Split, load_normalized, write_normalized


class Unsupported(QvidError):
    pass


class AdapterError(QvidError):
    """Raw annotations do not have the published layout"""
    pass


class DropRow(Exception):
    """Row is corrupt beyond repair; it goes to the drop log"""
    pass


@dataclass
class AdaptSummary:
    source_format: str
    out_path: str
    drop_log_path: str
    n_records: int = 0
    n_dropped: int = 0
    per_type: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'source_format': self.source_format,
            'out_path': self.out_path,
            'drop_log_path': self.drop_log_path,
            'n_records': self.n_records,
            'n_dropped': self.n_dropped,
            'per_type': dict(self.per_type)
        }


Row = Tuple[str, Dict[str, Any]]


def _text(row: Dict[str, Any], name: str) -> str:
    value = row.get(name)
    if value is None:
        raise DropRow(f'field "{name}" is missing')
    text = str(value).strip()
    if not text:
        raise DropRow(f'field "{name}" is empty')
    return text


def _options(row: Dict[str, Any], n: int) -> Tuple[str, ...]:
    return tuple(_text(row, f'a{i}') for i in range(n))


def _gold(value: Any, m: int) -> int:
    try:
        gold = int(str(value).strip())
    except ValueError:
        raise DropRow(f'answer index {value!r} is not an integer')
    if not 0 <= gold < m:
        raise DropRow(f'answer index {gold} is not an index into {m} options')
    return gold


def _span(ts: Any) -> Tuple[Optional[float], Optional[float]]:
    """'12.3-20.1' -> (12.3, 20.1); NaN bounds become None"""
    if ts is None or not str(ts).strip():
        return None, None
    start, sep, end = str(ts).strip().partition('-')
    if not sep:
        raise DropRow(f'timestamp {ts!r} is not "<start>-<end>"')
    try:
        bounds = [float(start), float(end)]
    except ValueError:
        raise DropRow(f'timestamp {ts!r} is not numeric')
    start_s, end_s = (None if math.isnan(b) else b for b in bounds)
    return start_s, end_s


class Adapter:
    """Converts one benchmark's annotation release into QARecords"""

    source_format: str = ''
    split: Split = Split.VAL
    required_fields: Sequence[str] = ()

    blog = logging.getLogger('qvidlog')

    def rows(self, raw_paths: Sequence[str]) -> Iterator[Row]:
        raise NotImplementedError

    def convert(self, row: Dict[str, Any]) -> QARecord:
        raise NotImplementedError

    def check_schema(self, fields: Sequence[str], where: str) -> None:
        missing = [name for name in self.required_fields if name not in fields]
        if missing:
            msg = f'{where}: {self.source_format} annotations lack {", ".join(missing)}'
            self.blog.error(msg)
            raise AdapterError(msg)

    @staticmethod
    def _single(raw_paths: Sequence[str], what: str) -> str:
        if not raw_paths:
            raise AdapterError(f'No {what} given')
        return raw_paths[0]


class CsvAdapter(Adapter):
    """NExT-QA style CSV: one question per row, options a0..a4, answer index"""

    video_column = 'video'
    type_names: Dict[str, str] = {}

    def rows(self, raw_paths: Sequence[str]) -> Iterator[Row]:
        csv_path = self._single(raw_paths, 'annotation CSV')
        with open(csv_path, 'r', encoding='utf-8', newline='') as f:
            reader = csv.DictReader(f)
            self.check_schema(reader.fieldnames or [], csv_path)
            for n, row in enumerate(reader, start=2):
                yield f'{path.basename(csv_path)}:{n}', row

    def question_type(self, code: str) -> str:
        code = code.strip().upper()
        return self.type_names.get(code, self.type_names.get(code[:1], code))

    def video_path(self, video: str) -> str:
        return f'{video}.mp4'

    def convert(self, row: Dict[str, Any]) -> QARecord:
        video = _text(row, self.video_column)
        options = _options(row, 5)
        return QARecord(
            record_id=f'{self.source_format}-{video}-{_text(row, "qid")}',
            video=VideoRef(video, SourceKind.VIDEO_FILE, self.video_path(video)),
            question=_text(row, 'question'),
            options=options,
            gold_index=_gold(row.get('answer'), len(options)),
            question_type=self.question_type(_text(row, 'type')),
            dataset=self.source_format
        )


class NextQAAdapter(CsvAdapter):
    """
    NExT-QA val.csv (video, frame_count, width, height, question, answer, qid, type, a0..a4).

    An optional second file, map_vid_vidorID.json, maps video ids to '<dir>/<vidor id>'.
    """

    source_format = 'nextqa'
    required_fields = ('video', 'question', 'answer', 'qid', 'type', 'a0', 'a1', 'a2', 'a3', 'a4')
    type_names = {'T': 'Temporal', 'C': 'Causal', 'D': 'Descriptive'}

    def __init__(self) -> None:
        self.video_map: Dict[str, str] = {}

    def rows(self, raw_paths: Sequence[str]) -> Iterator[Row]:
        if len(raw_paths) > 1:
            with open(raw_paths[1], 'r', encoding='utf-8') as f:
                self.video_map = {str(k): str(v) for k, v in json.load(f).items()}
        yield from super().rows(raw_paths)

    def video_path(self, video: str) -> str:
        return f'{self.video_map.get(video, video)}.mp4'


class IntentQAAdapter(CsvAdapter):
    """IntentQA test.csv; same layout as NExT-QA with a video_id column"""

    source_format = 'intentqa'
    split = Split.TEST
    video_column = 'video_id'
    required_fields = ('video_id', 'question', 'answer', 'qid', 'type', 'a0', 'a1', 'a2', 'a3', 'a4')
    type_names = {'CW': 'Why', 'CH': 'How', 'TP': 'Before&After', 'TN': 'Before&After', 'TC': 'Before&After'}

    def question_type(self, code: str) -> str:
        code = code.strip().upper()
        return self.type_names.get(code, code)


class StarAdapter(Adapter):
    """STAR_val.json: list of {question_id, question, video_id, start, end, answer, choices}"""

    source_format = 'star'
    required_fields = ('question_id', 'question', 'video_id', 'start', 'end', 'answer', 'choices')
    type_names = ('Interaction', 'Sequence', 'Prediction', 'Feasibility')

    def rows(self, raw_paths: Sequence[str]) -> Iterator[Row]:
        json_path = self._single(raw_paths, 'annotation JSON')
        with open(json_path, 'r', encoding='utf-8') as f:
            try:
                items = json.load(f)
            except ValueError as e:
                raise AdapterError(f'{json_path} is not JSON: {e}')
        if not isinstance(items, list):
            raise AdapterError(f'{json_path}: expected a list of questions')
        if items:
            self.check_schema(list(items[0]) if isinstance(items[0], dict) else [], f'{json_path}[0]')
        for n, item in enumerate(items):
            yield f'{path.basename(json_path)}[{n}]', item

    def convert(self, row: Dict[str, Any]) -> QARecord:
        if not isinstance(row, dict):
            raise DropRow('item is not an object')
        question_id = _text(row, 'question_id')
        question_type = question_id.split('_')[0]
        if question_type not in self.type_names:
            raise DropRow(f'unknown question type in id {question_id}')

        choices = row.get('choices')
        if not isinstance(choices, list) or len(choices) < 2:
            raise DropRow('fewer than two choices')
        try:
            ordered = sorted(choices, key=lambda c: int(c['choice_id']))
            options = tuple(_text(c, 'choice') for c in ordered)
        except (KeyError, TypeError, ValueError):
            raise DropRow('choice without choice_id/choice')

        answer = _text(row, 'answer')
        if answer not in options:
            raise DropRow('answer text is not one of the choices')

        try:
            start_s, end_s = float(row['start']), float(row['end'])
        except (KeyError, TypeError, ValueError):
            raise DropRow('start/end are not numbers')

        video = _text(row, 'video_id')
        return QARecord(
            record_id=f'star-{question_id}',
            video=VideoRef(video, SourceKind.VIDEO_FILE, f'{video}.mp4', start_s=start_s, end_s=end_s),
            question=_text(row, 'question'),
            options=options,
            gold_index=options.index(answer),
            question_type=question_type,
            dataset=self.source_format
        )


class JsonlAdapter(Adapter):
    """TVQA style JSONL: {qid, q, a0.., answer_idx, ts, vid_name}"""

    n_options = 5

    def rows(self, raw_paths: Sequence[str]) -> Iterator[Row]:
        jsonl_path = self._single(raw_paths, 'annotation JSONL')
        with open(jsonl_path, 'r', encoding='utf-8') as f:
            first = True
            for n, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                where = f'{path.basename(jsonl_path)}:{n}'
                try:
                    item = json.loads(line)
                except ValueError:
                    if first:
                        raise AdapterError(f'{where} is not JSON')
                    yield where, {'__corrupt__': line.strip()}
                    continue
                if first:
                    self.check_schema(list(item) if isinstance(item, dict) else [], where)
                    first = False
                yield where, item

    def video(self, row: Dict[str, Any]) -> VideoRef:
        raise NotImplementedError

    def convert(self, row: Dict[str, Any]) -> QARecord:
        if '__corrupt__' in row:
            raise DropRow('line is not JSON')
        options = _options(row, self.n_options)
        return QARecord(
            record_id=f'{self.source_format}-{_text(row, "qid")}',
            video=self.video(row),
            question=_text(row, 'q'),
            options=options,
            gold_index=_gold(row.get('answer_idx'), len(options)),
            question_type=None,
            dataset=self.source_format
        )


class TvqaAdapter(JsonlAdapter):
    """tvqa_val.jsonl; frames are pre-extracted (3 fps) into <show>_frames/<vid_name>"""

    source_format = 'tvqa'
    required_fields = ('qid', 'q', 'a0', 'a1', 'a2', 'a3', 'a4', 'answer_idx', 'ts', 'vid_name')

    def video(self, row: Dict[str, Any]) -> VideoRef:
        vid_name = _text(row, 'vid_name')
        show = str(row.get('show_name') or '').strip()
        frame_dir = f'{show.replace(" ", "_").lower()}_frames/{vid_name}' if show else vid_name
        start_s, end_s = _span(row.get('ts'))
        return VideoRef(vid_name, SourceKind.FRAME_DIR, frame_dir, start_s=start_s, end_s=end_s)


class How2QAAdapter(JsonlAdapter):
    """How2QA val JSONL in the TVQA layout with four options and 60-second clip files"""

    source_format = 'how2qa'
    n_options = 4
    required_fields = ('qid', 'q', 'a0', 'a1', 'a2', 'a3', 'answer_idx', 'ts', 'vid_name')

    def video(self, row: Dict[str, Any]) -> VideoRef:
        vid_name = _text(row, 'vid_name')
        start_s, end_s = _span(row.get('ts'))
        return VideoRef(vid_name, SourceKind.VIDEO_FILE, f'{vid_name}.mp4', start_s=start_s, end_s=end_s)


ADAPTERS = {
    'nextqa': NextQAAdapter,
    'star': StarAdapter,
    'how2qa': How2QAAdapter,
    'tvqa': TvqaAdapter,
    'intentqa': IntentQAAdapter
}


def get_adapter(source_format: str) -> Adapter:
    try:
        return ADAPTERS[source_format.lower()]()
    except KeyError:
        raise Unsupported(f'Unknown source format "{source_format}", '
                          f'expected one of {", ".join(sorted(ADAPTERS))}')


def adapt(source_format: str, raw_paths: Sequence[str], media_root: Optional[str], out_path: str,
          drop_log_path: Optional[str] = None) -> AdaptSummary:
    """
    Convert raw benchmark annotations into a normalized JSONL file.

    Corrupt rows are left out and listed in the drop log (JSONL, default <out_path>.drops.jsonl);
    a layout that doesn't match the release raises AdapterError. The output is read back
    with load_normalized before returning.
    """

    blog = logging.getLogger('qvidlog')
    adapter = get_adapter(source_format)
    drop_log_path = drop_log_path or out_path + '.drops.jsonl'

    blog.info(f'Adapting {adapter.source_format} annotations {", ".join(raw_paths)} into {out_path}')

    records: List[QARecord] = []
    drops: List[Dict[str, Any]] = []
    seen = set()

    for where, row in adapter.rows(raw_paths):
        try:
            record = adapter.convert(row)
            if record.record_id in seen:
                raise DropRow(f'duplicate record id {record.record_id}')
        except (DropRow, InvalidRecord, OutOfRange) as e:
            blog.warning(f'Dropping {where}: {e}')
            drops.append({'source_format': adapter.source_format, 'where': where, 'reason': str(e)})
            continue
        seen.add(record.record_id)
        records.append(record)

    out_dir = path.dirname(path.abspath(out_path))
    os.makedirs(out_dir, exist_ok=True)
    write_normalized(records, out_path)
    with open(drop_log_path, 'w', encoding='utf-8', newline='\n') as f:
        for drop in drops:
            f.write(json.dumps(drop, ensure_ascii=False) + '\n')

    if records:
        load_normalized(out_path, media_root, adapter.split, check_media=False)

    per_type = Counter(r.question_type for r in records if r.question_type is not None)
    summary = AdaptSummary(adapter.source_format, out_path, drop_log_path, len(records), len(drops),
                           dict(sorted(per_type.items())))
    blog.info(f'{adapter.source_format}: {summary.n_records} records, {summary.n_dropped} dropped')
    return summary
