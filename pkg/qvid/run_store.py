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

import json
import logging
import os
import tempfile

from os import path
from threading import Lock
from typing import Any, Dict, Iterable, List

from qvid.core_types import Prediction, QvidError

PREDICTIONS_FILE = 'predictions.jsonl'
COMPLETED_FILE = 'completed.jsonl'
MANIFEST_FILE = 'manifest.json'
ERRORS_FILE = 'errors.jsonl'


class RunStoreError(QvidError):
    pass


def write_atomic(file_path: str, text: str) -> None:
    """Replace file_path with text; readers never see a partial file"""
    directory = path.dirname(path.abspath(file_path))
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, file_path)
    except BaseException:
        if path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def prediction_line(prediction: Prediction) -> str:
    return json.dumps(prediction.to_json_dict(), ensure_ascii=False) + '\n'


class RunStore:
    """
    Output directory of one run.

    completed.jsonl is an append-only log of finished records, fsynced per line, used to
    resume. predictions.jsonl and manifest.json are written whole at the end of the run.
    """

    blog = logging.getLogger('qvidlog')

    def __init__(self, out_dir: str) -> None:
        self.out_dir = out_dir
        self._lock = Lock()

        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as e:
            raise RunStoreError(f"Can't create output directory {out_dir}: {e}")

    @property
    def predictions_path(self) -> str:
        return path.join(self.out_dir, PREDICTIONS_FILE)

    @property
    def completed_path(self) -> str:
        return path.join(self.out_dir, COMPLETED_FILE)

    @property
    def manifest_path(self) -> str:
        return path.join(self.out_dir, MANIFEST_FILE)

    @property
    def errors_path(self) -> str:
        return path.join(self.out_dir, ERRORS_FILE)

    def reset(self) -> None:
        """Forget any previous run in this directory"""
        for file_path in (self.completed_path, self.predictions_path, self.manifest_path, self.errors_path):
            if path.exists(file_path):
                self.blog.debug(f'Removing {file_path}')
                os.unlink(file_path)

    def load_completed(self) -> Dict[str, Prediction]:
        """
        Predictions logged by an earlier, possibly interrupted, run.

        A torn last line (crash mid-write) is dropped and the log is rewritten without it.
        """

        if not path.exists(self.completed_path):
            return {}

        with open(self.completed_path, 'r', encoding='utf-8') as f:
            lines = f.read().split('\n')

        completed: Dict[str, Prediction] = {}
        dropped = 0
        for n, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                prediction = Prediction.from_json_dict(json.loads(line))
            except (ValueError, KeyError, TypeError):
                if n < len(lines) - 1 and any(rest.strip() for rest in lines[n + 1:]):
                    raise RunStoreError(f'{self.completed_path}: line {n + 1} is corrupt')
                dropped += 1
                continue
            completed[prediction.record_id] = prediction

        if dropped:
            self.blog.warning(f'Dropped a torn line at the end of {self.completed_path}')
            write_atomic(self.completed_path, ''.join(prediction_line(p) for p in completed.values()))

        self.blog.info(f'Found {len(completed)} completed records in {self.out_dir}')
        return completed

    def append(self, prediction: Prediction) -> None:
        line = prediction_line(prediction)
        with self._lock:
            with open(self.completed_path, 'a', encoding='utf-8', newline='\n') as f:
                f.write(line)
                f.flush()
                os.fsync(f.fileno())

    def write_predictions(self, predictions: Iterable[Prediction]) -> None:
        write_atomic(self.predictions_path, ''.join(prediction_line(p) for p in predictions))

    def write_manifest(self, manifest: Dict[str, Any]) -> None:
        write_atomic(self.manifest_path, json.dumps(manifest, indent=2, ensure_ascii=False) + '\n')


def read_predictions(file_path: str) -> List[Prediction]:
    predictions = []
    with open(file_path, 'r', encoding='utf-8') as f:
        for n, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                predictions.append(Prediction.from_json_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise RunStoreError(f'{file_path}:{n}: not a prediction record ({e})')
    return predictions
