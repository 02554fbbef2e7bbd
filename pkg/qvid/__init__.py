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
"""Zero-shot video question answering over question-dependent frame captions."""
