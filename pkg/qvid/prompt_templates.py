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
import re

from dataclasses import dataclass
from enum import Enum
from threading import Lock
from typing import Dict, FrozenSet, List, Optional

from qvid.core_types import (CaptionSet, Conflict, MAX_OPTIONS, OutOfRange, QARecord, QvidError,
                             letter_for_index, option_letters, text_digest)
from qvid.utils.singleton import SingletonMeta


class InvalidTemplate(QvidError):
    pass


class NotFound(QvidError):
    pass


class InvalidQuestion(QvidError):
    pass


class InvalidCaptions(QvidError):
    pass


PLACEHOLDER_RE = re.compile(r'\{([A-Z_]+)\}')

RECONSTRUCTED_SUFFIX = '_reconstructed'


class TemplateKind(Enum):
    CAPTIONING = 'captioning'
    QA_TASK = 'qa_task'


ALLOWED_PLACEHOLDERS: Dict[TemplateKind, FrozenSet[str]] = {
    TemplateKind.CAPTIONING: frozenset({'Q'}),
    TemplateKind.QA_TASK: frozenset({'C', 'Q', 'OPTIONS', 'LETTERS'})
}


@dataclass(frozen=True)
class PromptTemplate:
    """Captioning instruction (B) or QA task instruction (T); body is kept byte-exact"""

    template_id: str
    kind: TemplateKind
    body: str
    description: str = ''

    @property
    def placeholders(self) -> FrozenSet[str]:
        return frozenset(PLACEHOLDER_RE.findall(self.body))

    @property
    def is_general(self) -> bool:
        """Captioning template that ignores the question"""
        return self.kind == TemplateKind.CAPTIONING and 'Q' not in self.placeholders

    @property
    def is_reconstruction(self) -> bool:
        return self.template_id.endswith(RECONSTRUCTED_SUFFIX)

    def validate(self) -> None:
        if not self.template_id or any(ch.isspace() for ch in self.template_id):
            raise InvalidTemplate(f'Invalid template id: "{self.template_id}"')
        if not self.body:
            raise InvalidTemplate(f'Template {self.template_id} has an empty body')

        unknown = self.placeholders - ALLOWED_PLACEHOLDERS[self.kind]
        if unknown:
            names = ', '.join('{' + p + '}' for p in sorted(unknown))
            raise InvalidTemplate(f'Template {self.template_id} ({self.kind.value}) '
                                  f'uses placeholders not allowed for its kind: {names}')


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    template_id: str
    placeholder_digest: str


class JoinerMode(Enum):
    PLAIN = 'plain'
    NUMBERED = 'numbered'


@dataclass(frozen=True)
class CaptionJoiner:
    """
    Builds the video description C from captions in frame order.

    PLAIN: each caption trimmed and terminated with a period, joined with one space.
    NUMBERED: the same, prefixed with 'Frame <i>:' (1-based).
    Empty captions are left out.
    """

    mode: JoinerMode = JoinerMode.PLAIN

    def join(self, captions: CaptionSet) -> str:
        parts = []
        for caption in captions.captions:
            text = caption.text.strip()
            if not text:
                continue
            if not text.endswith('.'):
                text += '.'
            if self.mode == JoinerMode.NUMBERED:
                text = f'Frame {caption.frame_index + 1}: {text}'
            parts.append(text)
        return ' '.join(parts)


def options_block(options: List[str]) -> str:
    """'Option A: a_1. Option B: a_2. ...'"""
    parts = []
    for i, option in enumerate(options):
        text = option.strip()
        if not text.endswith('.'):
            text += '.'
        parts.append(f'Option {letter_for_index(i)}: {text}')
    return ' '.join(parts)


def letters_block(m: int) -> str:
    """'(A,B,...,<m-th letter>)'"""
    return '(' + ','.join(option_letters(m)) + ')'


def _substitute(body: str, values: Dict[str, str], space_before_q: bool = False) -> str:
    """Single pass substitution: substituted values are never expanded again"""

    def replace(match: 're.Match') -> str:
        name = match.group(1)
        value = values[name]
        if space_before_q and name == 'Q' and match.start() > 0 and not body[match.start() - 1].isspace():
            return ' ' + value
        return value

    return PLACEHOLDER_RE.sub(replace, body)


def _digest_values(values: Dict[str, str]) -> str:
    return text_digest(json.dumps(values, sort_keys=True, ensure_ascii=False))


BUILTIN_TEMPLATES = (
    PromptTemplate(
        'dependent_base', TemplateKind.CAPTIONING,
        'Provide a detailed description of the image related to the question: {Q}',
        'Question-dependent captioning instruction used for the main results'
    ),
    PromptTemplate(
        'dependent_v1' + RECONSTRUCTED_SUFFIX, TemplateKind.CAPTIONING,
        'Based on the question: {Q} Write a short description of the image.',
        'Question-dependent captioning variant (1), reconstructed wording'
    ),
    PromptTemplate(
        'dependent_v2' + RECONSTRUCTED_SUFFIX, TemplateKind.CAPTIONING,
        'Describe the image in detail, focusing on what is relevant to the question: {Q}',
        'Question-dependent captioning variant (2), reconstructed wording'
    ),
    PromptTemplate(
        'general_v1' + RECONSTRUCTED_SUFFIX, TemplateKind.CAPTIONING,
        'A short image description:',
        'General captioning variant (1), reconstructed wording'
    ),
    PromptTemplate(
        'general_v2' + RECONSTRUCTED_SUFFIX, TemplateKind.CAPTIONING,
        'Write a detailed description for the image.',
        'General captioning variant (2), reconstructed wording'
    ),
    PromptTemplate(
        'qa_base', TemplateKind.QA_TASK,
        'Captions: {C} Question: {Q}. {OPTIONS} Considering the information presented in the captions, '
        'select the correct answer in one letter from the options {LETTERS}',
        'Base QA instruction used for the main results'
    ),
    PromptTemplate(
        'qa_v1' + RECONSTRUCTED_SUFFIX, TemplateKind.QA_TASK,
        'Captions: {C} Question: {Q}. {OPTIONS} The captions describe the frames of a video in the '
        'order they appear. Considering the information presented in the captions, which option answers '
        'the question correctly? Select the correct answer in one letter from the options {LETTERS}',
        'More detailed QA instruction variant (1), reconstructed wording'
    ),
    PromptTemplate(
        'qa_v2' + RECONSTRUCTED_SUFFIX, TemplateKind.QA_TASK,
        'Read the following descriptions of video frames, listed in temporal order, and answer the '
        'multiple-choice question about the video. Captions: {C} Question: {Q} {OPTIONS} Think about what '
        'happens in the video, then select the correct answer in one letter from the options {LETTERS}. '
        'Answer:',
        'More detailed QA instruction variant (2), reconstructed wording'
    ),
)


def builtin_catalog() -> List[PromptTemplate]:
    """Built-in captioning (B) and QA task (T) templates"""
    return list(BUILTIN_TEMPLATES)


class TemplateRegistry:
    """
    Registry of prompt templates.

    Templates whose id ends with '_reconstructed' are also reachable by the short id
    without the suffix; provenance always uses the registered id.
    """

    blog = logging.getLogger('qvidlog')

    def __init__(self, with_builtins: bool = True) -> None:
        self._lock = Lock()
        self._templates: Dict[str, PromptTemplate] = {}
        self._aliases: Dict[str, str] = {}

        if with_builtins:
            for template in builtin_catalog():
                self.register(template)

    def register(self, t: PromptTemplate) -> str:
        """Validate and store template, returns its id"""
        t.validate()

        with self._lock:
            if t.template_id in self._templates or t.template_id in self._aliases:
                msg = f'Template {t.template_id} is already registered'
                self.blog.error(msg)
                raise Conflict(msg)

            self._templates[t.template_id] = t
            if t.is_reconstruction:
                alias = t.template_id[:-len(RECONSTRUCTED_SUFFIX)]
                if alias not in self._templates and alias not in self._aliases:
                    self._aliases[alias] = t.template_id

        self.blog.debug(f'Registered {t.kind.value} template {t.template_id}')
        return t.template_id

    def resolve_id(self, template_id: str) -> str:
        """Registered id for an id or short alias"""
        with self._lock:
            if template_id in self._templates:
                return template_id
            if template_id in self._aliases:
                return self._aliases[template_id]
        raise NotFound(f'No template with id "{template_id}"')

    def get(self, template_id: str, kind: Optional[TemplateKind] = None) -> PromptTemplate:
        """Template by id or alias; when kind is given the template must be of that kind"""
        template = self._templates[self.resolve_id(template_id)]
        if kind is not None and template.kind != kind:
            raise InvalidTemplate(f'Template {template.template_id} is a {template.kind.value} template, '
                                  f'expected {kind.value}')
        return template

    def list(self, kind: Optional[TemplateKind] = None) -> List[PromptTemplate]:
        with self._lock:
            templates = list(self._templates.values())
        return [t for t in templates if kind is None or t.kind == kind]

    def load_catalog(self, file_path: str) -> List[str]:
        """Register every template of a catalog file, returns registered ids"""
        self.blog.info(f'Loading template catalog {file_path}')
        with open(file_path, 'r', encoding='utf-8', newline='') as f:
            templates = parse_catalog(f.read())
        return [self.register(t) for t in templates]

    def render_caption_instruction(self, template_id: str, question: str) -> RenderedPrompt:
        """
        E = concat(B, Q): {Q} is replaced with the question verbatim. A single space is
        inserted when the text before {Q} does not end in whitespace.
        """

        template = self.get(template_id, TemplateKind.CAPTIONING)
        values = {}
        if 'Q' in template.placeholders:
            if not question or not question.strip():
                raise InvalidQuestion(f'Empty question for template {template.template_id}')
            values['Q'] = question

        text = _substitute(template.body, values, space_before_q=True)
        return RenderedPrompt(text, template.template_id, _digest_values(values))

    def render_qa_prompt(self, template_id: str, captions: CaptionSet, record: QARecord,
                         joiner: CaptionJoiner = CaptionJoiner()) -> RenderedPrompt:
        """L = concat(C, Q, A, T)"""
        template = self.get(template_id, TemplateKind.QA_TASK)

        if len(captions) == 0:
            raise InvalidCaptions(f'No captions for record #{record.record_id}')
        if record.m > MAX_OPTIONS:
            raise OutOfRange(f'Record #{record.record_id} has {record.m} options')

        values = {
            'C': joiner.join(captions),
            'Q': record.question,
            'OPTIONS': options_block(list(record.options)),
            'LETTERS': letters_block(record.m)
        }
        values = {k: v for k, v in values.items() if k in template.placeholders}

        text = _substitute(template.body, values)
        return RenderedPrompt(text, template.template_id, _digest_values(values))


class DefaultTemplates(TemplateRegistry, metaclass=SingletonMeta):
    """Process-wide registry with the built-in templates; filled at startup, read afterwards"""
    pass


CATALOG_RECORD = '[template]'
CATALOG_OPEN = '~~~ body\n'
CATALOG_CLOSE = '\n~~~ end'


def parse_catalog(text: str) -> List[PromptTemplate]:
    """
    Parse catalog text. Record layout:

        [template] <id>
        kind: captioning|qa_task
        description: <one line>        (optional)
        ~~~ body
        <body, preserved byte-exact>
        ~~~ end

    Lines starting with '#' and blank lines between records are ignored.
    """

    templates = []
    pos = 0
    while pos < len(text):
        line_end = text.find('\n', pos)
        if line_end == -1:
            line_end = len(text)
        line = text[pos:line_end].rstrip('\r')
        pos = line_end + 1

        if not line.strip() or line.startswith('#'):
            continue
        if not line.startswith(CATALOG_RECORD):
            raise InvalidTemplate(f'Expected "{CATALOG_RECORD} <id>", got: {line}')

        template_id = line[len(CATALOG_RECORD):].strip()
        fields = {}
        while True:
            line_end = text.find('\n', pos)
            if line_end == -1:
                raise InvalidTemplate(f'Template {template_id} has no body')
            line = text[pos:line_end + 1]
            pos = line_end + 1
            if line.rstrip('\r\n') == CATALOG_OPEN.rstrip('\n'):
                break
            key, sep, value = line.partition(':')
            if not sep:
                raise InvalidTemplate(f'Template {template_id}: unexpected line: {line.strip()}')
            fields[key.strip()] = value.strip()

        body_end = text.find(CATALOG_CLOSE, pos - 1)
        if body_end == -1 or body_end < pos - 1:
            raise InvalidTemplate(f'Template {template_id}: body is not closed with "~~~ end"')
        body = text[pos:body_end] if body_end >= pos else ''
        pos = body_end + len(CATALOG_CLOSE)
        if text.startswith('\n', pos):
            pos += 1

        try:
            kind = TemplateKind(fields.get('kind', ''))
        except ValueError:
            raise InvalidTemplate(f'Template {template_id}: unknown kind "{fields.get("kind")}"')

        templates.append(PromptTemplate(template_id, kind, body, fields.get('description', '')))

    return templates


def dump_catalog(templates: List[PromptTemplate]) -> str:
    """Catalog text that parse_catalog reads back into the same templates"""
    records = []
    for t in templates:
        header = f'{CATALOG_RECORD} {t.template_id}\nkind: {t.kind.value}\n'
        if t.description:
            header += f'description: {t.description}\n'
        records.append(header + CATALOG_OPEN + t.body + CATALOG_CLOSE + '\n')
    return '\n'.join(records)
