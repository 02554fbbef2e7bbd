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

import dataclasses
import hashlib
import string

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence, Tuple

LETTERS = string.ascii_uppercase
MAX_OPTIONS = len(LETTERS)


class QvidError(Exception):
    """Root of all errors raised by the harness"""
    pass


class OutOfRange(QvidError):
    pass


class NotAnOption(QvidError):
    pass


class InvalidRecord(QvidError):
    pass


class Conflict(QvidError):
    pass


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def text_digest(text: str) -> str:
    return sha256_hex(text.encode('utf-8'))


def letter_for_index(i: int) -> str:
    """Option letter for 0-based option index: 0 -> 'A', 25 -> 'Z'"""
    if not 0 <= i < MAX_OPTIONS:
        raise OutOfRange(f'Option index {i} is out of range 0..{MAX_OPTIONS - 1}')
    return LETTERS[i]


def index_for_letter(ch: str, m: int) -> int:
    """Case-insensitive inverse of letter_for_index restricted to the first m letters"""
    if not 2 <= m <= MAX_OPTIONS:
        raise OutOfRange(f'Option count {m} is out of range 2..{MAX_OPTIONS}')
    if len(ch) != 1 or ch.upper() not in LETTERS[:m]:
        raise NotAnOption(f'"{ch}" is not one of the options {LETTERS[0]}..{LETTERS[m - 1]}')
    return LETTERS.index(ch.upper())


class SourceKind(Enum):
    VIDEO_FILE = 'video_file'
    FRAME_DIR = 'frame_dir'


@dataclass(frozen=True)
class VideoRef:
    """
    Video source. total_frames stays None until the source is probed.

    start_s/end_s restrict sampling to an annotated clip span; fps is needed to map
    that span onto frame indices and is probed when absent.
    """

    video_id: str
    kind: SourceKind
    path: str
    total_frames: Optional[int] = None
    start_s: Optional[float] = None
    end_s: Optional[float] = None
    fps: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.video_id:
            raise InvalidRecord('video_id must be non-empty')
        if self.total_frames is not None and self.total_frames < 1:
            raise InvalidRecord(f'Video #{self.video_id}: total_frames must be >= 1, got {self.total_frames}')

    @property
    def has_clip(self) -> bool:
        return self.start_s is not None or self.end_s is not None

    def with_total_frames(self, total_frames: int) -> 'VideoRef':
        return dataclasses.replace(self, total_frames=total_frames)


@dataclass(frozen=True)
class Frame:
    """One sampled still: position in the sampled set and in the original video"""

    index: int
    source_index: int
    image_bytes: bytes

    def __post_init__(self) -> None:
        if self.index < 0 or self.source_index < 0:
            raise ValueError(f'Frame indices must be non-negative: {self.index}, {self.source_index}')
        if not self.image_bytes:
            raise ValueError(f'Frame {self.source_index} has no image data')

    @property
    def digest(self) -> str:
        return sha256_hex(self.image_bytes)


@dataclass(frozen=True)
class QARecord:
    """One multiple-choice question about one video"""

    record_id: str
    video: VideoRef
    question: str
    options: Tuple[str, ...]
    gold_index: Optional[int] = None
    question_type: Optional[str] = None
    dataset: str = ''

    def __post_init__(self) -> None:
        object.__setattr__(self, 'options', tuple(self.options))

        if not self.record_id:
            raise InvalidRecord('record_id must be non-empty')
        if not self.question.strip():
            raise InvalidRecord(f'Record #{self.record_id} has an empty question')
        if not 2 <= len(self.options) <= MAX_OPTIONS:
            raise OutOfRange(f'Record #{self.record_id} has {len(self.options)} options, '
                             f'expected 2..{MAX_OPTIONS}')
        if self.gold_index is not None and not 0 <= self.gold_index < len(self.options):
            raise InvalidRecord(f'Record #{self.record_id}: gold_index {self.gold_index} '
                                f'is not an index into {len(self.options)} options')

    @property
    def m(self) -> int:
        return len(self.options)


@dataclass(frozen=True)
class Caption:
    frame_index: int
    text: str
    truncated: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, 'text', self.text.strip())


@dataclass(frozen=True)
class CaptionSet:
    """Question-dependent captions of one (video, question) pair in frame order"""

    captions: Tuple[Caption, ...]
    video_id: str
    question_hash: str

    def __post_init__(self) -> None:
        object.__setattr__(self, 'captions', tuple(self.captions))
        for prev, cur in zip(self.captions, self.captions[1:]):
            if cur.frame_index <= prev.frame_index:
                raise ValueError(f'Captions of video #{self.video_id} are not strictly ordered: '
                                 f'{prev.frame_index} then {cur.frame_index}')

    def __len__(self) -> int:
        return len(self.captions)

    @property
    def texts(self) -> Tuple[str, ...]:
        return tuple(c.text for c in self.captions)


@dataclass(frozen=True)
class DecodeParams:
    """Decoding settings; top_p None means greedy decoding"""

    max_new_tokens: int
    top_p: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError(f'max_new_tokens must be >= 1, got {self.max_new_tokens}')
        if self.top_p is not None and not 0.0 < self.top_p <= 1.0:
            raise ValueError(f'top_p must be in (0, 1], got {self.top_p}')

    @property
    def greedy(self) -> bool:
        return self.top_p is None


@dataclass(frozen=True)
class Prediction:
    """
    Parsed answer of the reasoner plus everything needed to reproduce it.

    answer_index is None when the output was Unparsed (or the record failed).
    """

    record_id: str
    answer_index: Optional[int]
    raw_text: str
    caption_template_id: str
    qa_template_id: str
    captioner_model_id: str
    reasoner_model_id: str
    n_frames: int
    failed: bool = False

    @property
    def parsed(self) -> bool:
        return self.answer_index is not None

    @property
    def letter(self) -> Optional[str]:
        return letter_for_index(self.answer_index) if self.parsed else None

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            'record_id': self.record_id,
            'answer_index': self.answer_index,
            'raw_text': self.raw_text,
            'letter': self.letter,
            'caption_template_id': self.caption_template_id,
            'qa_template_id': self.qa_template_id,
            'captioner_model_id': self.captioner_model_id,
            'reasoner_model_id': self.reasoner_model_id,
            'n_frames': self.n_frames,
            'failed': self.failed
        }

    @classmethod
    def from_json_dict(cls, obj: Dict[str, Any]) -> 'Prediction':
        return cls(
            record_id=obj['record_id'],
            answer_index=obj['answer_index'],
            raw_text=obj['raw_text'],
            caption_template_id=obj['caption_template_id'],
            qa_template_id=obj['qa_template_id'],
            captioner_model_id=obj['captioner_model_id'],
            reasoner_model_id=obj['reasoner_model_id'],
            n_frames=obj['n_frames'],
            failed=obj.get('failed', False)
        )


def option_letters(m: int) -> Sequence[str]:
    """First m option letters"""
    if not 1 <= m <= MAX_OPTIONS:
        raise OutOfRange(f'Option count {m} is out of range 1..{MAX_OPTIONS}')
    return LETTERS[:m]
