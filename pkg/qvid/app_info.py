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
import subprocess

from configparser import ConfigParser
from os import path
from typing import Any, Dict

from qvid.utils.singleton import SingletonMeta


class AppInfo(metaclass=SingletonMeta):
    """Name, description and version of the harness (config/app.conf) plus the git build"""

    blog = logging.getLogger('qvidlog')

    CONFIG_FILE = path.join(path.dirname(path.abspath(__file__)), '../config/app.conf')

    def __init__(self, config_file: str = CONFIG_FILE) -> None:
        """Raise FileNotFoundError if config_file is missing, KeyError if a field is"""

        config_file = path.abspath(config_file)
        self.blog.debug(f'Reading app info from {config_file}')

        if not path.isfile(config_file):
            msg = f"App config {config_file} doesn't exist"
            self.blog.fatal(msg)
            raise FileNotFoundError(msg)

        parser = ConfigParser()
        with open(config_file, 'r', encoding='utf-8') as f:
            parser.read_file(f)
        general = parser['GENERAL']

        self.app_name: str = general['name']
        self.app_description: str = general['desc']
        self.app_version: str = general['version']
        self.app_build: str = self._git_build()

        self.blog.info(f'App info: {self.version_line}')

    @staticmethod
    def _git_build() -> str:
        """Short hash of the checked out commit, empty outside a git work tree"""
        try:
            git = subprocess.run(['git', 'rev-parse', '--short', 'HEAD'], stdout=subprocess.PIPE,
                                 stderr=subprocess.DEVNULL, timeout=5,
                                 cwd=path.join(path.dirname(path.abspath(__file__)), '../'))
        except (OSError, subprocess.SubprocessError):
            return ''
        return git.stdout.decode('utf-8').strip() if git.returncode == 0 else ''

    @property
    def version_line(self) -> str:
        build = f' ({self.app_build})' if self.app_build else ''
        return f'{self.app_name} {self.app_version}{build}'

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.app_name, 'version': self.app_version, 'build': self.app_build}
