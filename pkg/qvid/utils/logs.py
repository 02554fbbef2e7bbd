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
import logging.handlers
import os
import sys

from os import path
from typing import Optional

LOGGER_NAME = 'qvidlog'

LOGGING_DIR: str

if os.name == 'nt':
    LOGGING_DIR = r'%AppData%\qvid\logs'  # only %AppData% is expanded
else:
    LOGGING_DIR = '/var/log/qvid'

FORMAT = ('%(asctime)s - %(process)d - %(threadName)s (%(thread)d) '
          '- %(levelname)s - %(module)s - %(message)s')


def default_logging_dir() -> str:
    """Logging directory from QVID_LOG_DIR or the platform default"""
    env_dir = os.getenv('QVID_LOG_DIR')
    if env_dir:
        return env_dir

    if os.name == 'nt':
        return LOGGING_DIR.replace('%AppData%', os.getenv('APPDATA', ''))
    return LOGGING_DIR


def _reset_handlers(logger: logging.Logger) -> None:
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()


def setup_logging(log_dir: Optional[str] = None, verbose: bool = False) -> bool:
    """
    Setup logging of the 'qvidlog' logger.

    Messages go to stderr (INFO, or DEBUG when verbose) and into two daily rotated
    files inside log_dir: qvid-info.log (INFO) and qvid-warn-error.log (WARN).
    If log_dir can't be written, file logging is turned off and a message is printed.

    Returns True if file logging is enabled.
    """

    log_dir = log_dir or default_logging_dir()

    qlogger = logging.getLogger(LOGGER_NAME)
    qlogger.setLevel(logging.DEBUG)
    qlogger.propagate = False
    _reset_handlers(qlogger)

    formatter = logging.Formatter(FORMAT)

    sh = logging.StreamHandler(sys.stderr)
    sh.setLevel(logging.DEBUG if verbose else logging.INFO)
    sh.setFormatter(formatter)
    qlogger.addHandler(sh)

    try:
        os.makedirs(log_dir, exist_ok=True)
    except OSError:
        pass

    if not path.isdir(log_dir) or not os.access(log_dir, os.W_OK):
        print(f"Can't access logging directory {log_dir}.\n"
              f'Please, run "sudo mkdir -p {log_dir} && sudo chown $(whoami) {log_dir}" '
              f'or pass --log-dir.\n'
              f'Logging into files will be turned off.', file=sys.stderr)
        return False

    ifh = logging.handlers.TimedRotatingFileHandler(
        filename=path.join(log_dir, 'qvid-info.log'),
        when='d',
        backupCount=3,
        encoding='utf-8'
    )
    ifh.setLevel(logging.INFO)
    ifh.setFormatter(formatter)

    wfh = logging.handlers.TimedRotatingFileHandler(
        filename=path.join(log_dir, 'qvid-warn-error.log'),
        when='d',
        backupCount=7,
        encoding='utf-8'
    )
    wfh.setLevel(logging.WARN)
    wfh.setFormatter(formatter)

    qlogger.addHandler(ifh)
    qlogger.addHandler(wfh)

    return True
