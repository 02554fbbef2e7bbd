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

import datetime
import json
import logging
import sys
import traceback

from functools import wraps
from threading import Lock
from typing import Any, Dict, List, Optional

from qvid.core_types import QvidError
from qvid.utils.singleton import SingletonMeta


class UsageError(QvidError):
    """Invalid command line flags or config values"""
    pass


class ErrorManager(metaclass=SingletonMeta):
    """
    Manage errors and exceptions raised while processing records.

    Errors are kept in memory and, once bind() was called, appended to an
    errors.jsonl file inside the run directory.
    """

    blog = logging.getLogger('qvidlog')

    def __init__(self) -> None:
        self._lock = Lock()
        self._errors: List[Dict[str, Any]] = []
        self._errors_file: Optional[str] = None

    def bind(self, errors_file: Optional[str]) -> None:
        """Set file that new error reports are appended to (None to stop writing)"""
        self.blog.debug(f'Binding error reports to {errors_file}')
        with self._lock:
            self._errors_file = errors_file

    def get_all_errors(self) -> List[Dict[str, Any]]:
        """Get list of all reported errors"""
        with self._lock:
            return list(self._errors)

    def report_error(self, name: str, stacktrace: str, record_id: Optional[str] = None) -> None:
        """Report new error"""
        self.blog.info('Reporting new error: ' + name + (f' (record #{record_id})' if record_id else ''))

        entry = {
            'name': name,
            'record_id': record_id,
            'stacktrace': stacktrace,
            'reported_at': datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds')
        }

        with self._lock:
            self._errors.append(entry)
            if self._errors_file is None:
                return
            try:
                with open(self._errors_file, 'a', encoding='utf-8') as f:
                    f.write(json.dumps(entry, ensure_ascii=False) + '\n')
            except OSError:
                self.blog.exception(f"Can't write error report into {self._errors_file}")

    def report_exception(self, e: BaseException, record_id: Optional[str] = None) -> None:
        """Report exception together with its traceback"""
        self.report_error(f'{type(e).__name__}: {e}',
                          ''.join(traceback.format_exception(type(e), e, e.__traceback__)),
                          record_id)

    def get_number_of_errors(self) -> int:
        """Returns number of reported errors"""
        with self._lock:
            return len(self._errors)

    def clear_all_errors(self) -> None:
        """Forget all reported errors; the errors file is left as is"""
        self.blog.debug('Removing all errors')
        with self._lock:
            self._errors = []


def error_line(e: BaseException) -> str:
    """One-line, machine-parsable description of an error"""
    message = ' '.join(str(e).split())
    return f'error: {type(e).__name__}: {message}'


def catch_error(f):
    """
    Catches errors in commands.

    Domain errors end the command with exit code 1, usage errors with 2 and
    Ctrl-C with 130; every error is logged, reported to the ErrorManager and
    printed to stderr as a single 'error: <Class>: <message>' line.
    """

    @wraps(f)
    def wrap(*args, **kwargs) -> int:
        try:
            return f(*args, **kwargs)
        except KeyboardInterrupt:
            logging.getLogger('qvidlog').warning('Interrupted by user')
            print('error: KeyboardInterrupt: interrupted', file=sys.stderr)
            return 130
        except UsageError as e:
            logging.getLogger('qvidlog').error(str(e))
            print(error_line(e), file=sys.stderr)
            return 2
        except (QvidError, OSError) as e:
            logging.getLogger('qvidlog').exception(e)
            ErrorManager().report_exception(e)
            print(error_line(e), file=sys.stderr)
            return 1

    return wrap
