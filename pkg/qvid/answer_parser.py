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

import logging
import re

from enum import Enum
from typing import Optional, Sequence, Tuple

from qvid.core_types import MAX_OPTIONS, LETTERS


class ParseRule(Enum):
    """Rules of parse_answer, in the order they are tried"""
    BARE_LETTER = 1
    LETTER_PATTERN = 2
    OPTION_TEXT = 3
    UNPARSED = 4


BARE_LETTER_RE = re.compile(r'^(?:\((?P<p>[A-Za-z])\)|\[(?P<b>[A-Za-z])\]|(?P<l>[A-Za-z])\)?)[.:]?$')

LETTER_PATTERN_RE = re.compile(
    r'\b(?P<key>option|answer)\b(?:\s+is\b)?(?:\s*[:#=]\s*|\s+)'
    r'(?P<open>[(\[])?(?P<kw>[A-Za-z])(?(open)[)\]])(?![A-Za-z0-9])'
    r'|[(\[](?P<br>[A-Za-z])[)\]]',
    re.IGNORECASE
)

FOLLOWED_BY_WORD_RE = re.compile(r'\s+[A-Za-z]')


def _valid(letter: str, m: int) -> Optional[int]:
    index = LETTERS.index(letter.upper())
    return index if index < m else None


def _bare_letter(text: str, m: int) -> Optional[int]:
    match = BARE_LETTER_RE.match(text)
    if match is None:
        return None
    letter = match.group('p') or match.group('b') or match.group('l')
    return _valid(letter, m)


def _letter_pattern(text: str, m: int) -> Optional[int]:
    for match in LETTER_PATTERN_RE.finditer(text):
        if match.group('br') is not None:
            letter = match.group('br')
        else:
            letter = match.group('kw')
            # "the answer is a dog": article, not an option letter
            if (match.group('key').lower() == 'answer' and match.group('open') is None
                    and letter.islower() and FOLLOWED_BY_WORD_RE.match(text, match.end())):
                continue

        index = _valid(letter, m)
        if index is not None:
            return index
    return None


def _normalize_option(text: str) -> str:
    return text.strip().rstrip('.').strip().casefold()


def _option_text(text: str, options: Sequence[str]) -> Optional[int]:
    wanted = _normalize_option(text)
    if not wanted:
        return None
    for i, option in enumerate(options):
        if _normalize_option(option) == wanted:
            return i
    return None


def parse_answer_with_rule(raw: str, m: int, options: Sequence[str] = ()) -> Tuple[Optional[int], ParseRule]:
    """parse_answer plus the rule that produced the result"""
    if not isinstance(raw, str) or not 2 <= m <= MAX_OPTIONS:
        return None, ParseRule.UNPARSED

    text = raw.strip()

    index = _bare_letter(text, m)
    if index is not None:
        return index, ParseRule.BARE_LETTER

    index = _letter_pattern(text, m)
    if index is not None:
        return index, ParseRule.LETTER_PATTERN

    index = _option_text(text, options[:m])
    if index is not None:
        return index, ParseRule.OPTION_TEXT

    logging.getLogger('qvidlog').debug(f'Unparsed answer: {text[:80]!r}')
    return None, ParseRule.UNPARSED


def parse_answer(raw: str, m: int, options: Sequence[str] = ()) -> Optional[int]:
    """
    0-based option index named by raw reasoner output, or None (Unparsed).

    Rules, first hit wins:
      1. trimmed output is a single valid letter, optionally as (X), [X] or X),
         optionally followed by ':' or '.'
      2. first "Option X", "Answer: X" / "answer is X" or "(X)" / "[X]" with a valid
         letter X, case-insensitive; after "answer", an unbracketed lowercase letter
         followed by a word is read as an article and skipped
      3. trimmed output equals one option text, case-insensitive, trailing period ignored
      4. Unparsed

    Never raises; m outside 2..26 gives Unparsed.
    """

    return parse_answer_with_rule(raw, m, options)[0]
