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

from threading import RLock
from typing import Any, Dict


class SingletonMeta(type):
    """
    Thread-safe metaclass for process-wide service objects (template registry,
    error manager, app info).

    First call constructs the instance under a lock; later calls return it.
    Use forget() to drop an instance, e.g. when a test needs a fresh one.
    """

    _instances: Dict[type, Any] = {}
    _instances_lock = RLock()  # singletons may construct other singletons

    def __call__(cls, *args, **kwargs):
        instance = cls._instances.get(cls)
        if instance is not None:
            return instance

        with cls._instances_lock:
            if cls not in cls._instances:
                cls._instances[cls] = super().__call__(*args, **kwargs)
            return cls._instances[cls]

    def forget(cls) -> None:
        """Drop the cached instance of this class"""
        with cls._instances_lock:
            cls._instances.pop(cls, None)
