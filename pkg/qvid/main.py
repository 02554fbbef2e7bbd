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

import argparse
import logging
import sys

from typing import List, Optional

from qvid import commands
from qvid.adapters import ADAPTERS
from qvid.app_info import AppInfo
from qvid.utils.logs import setup_logging


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    """Flags overriding qvid.conf; None means 'not given'"""
    p.add_argument('--dataset', required=True, help='normalized dataset JSONL')
    p.add_argument('--out', required=True, help='output directory')
    p.add_argument('--media-root', help='root for relative video paths')
    p.add_argument('--captioner-url')
    p.add_argument('--captioner-model')
    p.add_argument('--captioner-protocol', choices=['native', 'chat'])
    p.add_argument('--reasoner-url')
    p.add_argument('--reasoner-model')
    p.add_argument('--reasoner-protocol', choices=['native', 'chat'])
    p.add_argument('--max-in-flight', type=int, help='captioner requests in flight')
    p.add_argument('--n-frames', type=int, help='frames sampled per video (default 64)')
    p.add_argument('--caption-template', help='captioning template id (default dependent_base)')
    p.add_argument('--qa-template', help='QA template id (default qa_base)')
    p.add_argument('--joiner', choices=['plain', 'numbered'])
    p.add_argument('--catalog', help='extra template catalog file')
    p.add_argument('--caption-max-tokens', type=int, help='default 30')
    p.add_argument('--caption-top-p', help='default 0.7; empty for greedy')
    p.add_argument('--caption-seed', type=int)
    p.add_argument('--cache-dir')
    p.add_argument('--no-cache', dest='cache_enabled', action='store_const', const=False, default=None)
    p.add_argument('--workers', type=int)
    p.add_argument('--fail-policy', choices=['abort', 'skip_record'])
    p.add_argument('--quiet', '-q', action='store_true', help='no progress bar')


def build_parser() -> argparse.ArgumentParser:
    app_info = AppInfo()

    parser = argparse.ArgumentParser(prog='qvid', description=app_info.app_description)
    parser.add_argument('--version', action='version', version=app_info.version_line)
    parser.add_argument('--verbose', '-v', action='store_true', help='debug output on stderr')
    parser.add_argument('--log-dir', help='directory for log files (default: QVID_LOG_DIR or /var/log/qvid)')
    parser.add_argument('--config', help='run config file (default: config/qvid.conf)')

    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('ingest', help='convert benchmark annotations to a normalized dataset')
    p.add_argument('source_format', choices=sorted(ADAPTERS))
    p.add_argument('raw', nargs='+', help='raw annotation file(s)')
    p.add_argument('--media-root')
    p.add_argument('--out', required=True)
    p.add_argument('--drop-log')
    p.set_defaults(func=commands.cmd_ingest)

    p = sub.add_parser('synth', help='write a synthetic frame-directory dataset')
    p.add_argument('--out', required=True)
    p.add_argument('--records', type=int, default=10)
    p.add_argument('--m', default='4', help='option count(s), comma separated, cycled over records')
    p.add_argument('--seed', type=int, default=7)
    p.set_defaults(func=commands.cmd_synth)

    p = sub.add_parser('run', help='run the pipeline over a dataset')
    _add_run_flags(p)
    p.add_argument('--resume', action='store_true', help='continue an interrupted run in --out')
    p.set_defaults(func=commands.cmd_run)

    p = sub.add_parser('eval', help='score predictions')
    p.add_argument('--dataset', required=True)
    p.add_argument('--predictions', required=True)
    p.add_argument('--media-root')
    p.add_argument('--format', choices=['plain', 'json'], default='plain')
    p.add_argument('--impute-seed', type=int, help='replace Unparsed answers by seeded random guesses')
    p.add_argument('--report-out')
    p.set_defaults(func=commands.cmd_eval)

    p = sub.add_parser('ablate', help='run a captioning x QA template matrix')
    _add_run_flags(p)
    p.add_argument('--caption-templates', required=True, help='comma separated ids')
    p.add_argument('--qa-templates', required=True, help='comma separated ids')
    p.add_argument('--captioner-models', help='comma separated captioner model ids')
    p.add_argument('--format', choices=['plain', 'json'], default='plain')
    p.set_defaults(func=commands.cmd_ablate)

    p = sub.add_parser('mock-serve', help='serve the deterministic mock endpoints')
    p.add_argument('--port', type=int, default=8000)
    p.add_argument('--host', default='127.0.0.1')
    p.add_argument('--rig', help='rig file')
    p.add_argument('--delay', type=float, default=0.0, help='fixed delay per request, seconds')
    p.add_argument('--request-log', help='append requests to this JSONL file')
    p.set_defaults(func=commands.cmd_mock_serve)

    p = sub.add_parser('templates', help='list, show or dump prompt templates')
    p.add_argument('action', choices=['list', 'show', 'dump'])
    p.add_argument('template_id', nargs='?')
    p.add_argument('--kind', choices=['captioning', 'qa_task'])
    p.add_argument('--catalog', help='extra template catalog file')
    p.add_argument('--out')
    p.set_defaults(func=commands.cmd_templates)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    if sys.version_info < (3, 9):
        print('Invalid python version. Use python 3.9 or newer', file=sys.stderr)
        return 1

    parser = build_parser()
    args = parser.parse_args(argv)

    setup_logging(args.log_dir, args.verbose)

    blog = logging.getLogger('qvidlog')
    blog.info('Finished logging setup')
    blog.debug(f'Running command {args.command}')

    return args.func(args)


if __name__ == '__main__':
    sys.exit(main())
