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
import json
import logging
import sys

from os import path
from typing import List, Optional

from qvid.adapters import adapt
from qvid.datasets import load_normalized, synthesize_fixture
from qvid.evaluation import ablate, render_report, score
from qvid.mock_server import serve
from qvid.pipeline import Pipeline
from qvid.prompt_templates import DefaultTemplates, TemplateKind, dump_catalog
from qvid.run_config_parser import RunConfigParser, RunSpec
from qvid.run_store import MANIFEST_FILE, read_predictions
from qvid.utils.errorm import UsageError, catch_error


def _run_spec(args: argparse.Namespace) -> RunSpec:
    """Resolve config file < env < flags and load the template catalog it names"""
    spec = RunConfigParser(getattr(args, 'config', None)).parse(vars(args))
    if spec.pipeline.catalog_file:
        DefaultTemplates().load_catalog(spec.pipeline.catalog_file)
    return spec


def _id_list(value: str, flag: str) -> List[str]:
    ids = [v.strip() for v in value.split(',') if v.strip()]
    if not ids:
        raise UsageError(f'{flag} needs at least one template id')
    return ids


def _write_or_print(text: str, out_path: Optional[str]) -> None:
    if out_path:
        with open(out_path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
    else:
        sys.stdout.write(text)


@catch_error
def cmd_ingest(args: argparse.Namespace) -> int:
    """Convert raw benchmark annotations into a normalized dataset file"""
    logging.getLogger('qvidlog').info(f'Ingesting {args.source_format} annotations')

    summary = adapt(args.source_format, args.raw, args.media_root, args.out, args.drop_log)
    print(json.dumps(summary.to_dict(), indent=2, ensure_ascii=False))
    return 0


@catch_error
def cmd_synth(args: argparse.Namespace) -> int:
    """Write a synthetic frame-directory dataset"""
    counts = [int(v) for v in args.m.split(',')] if args.m else [4]
    dataset = synthesize_fixture(args.out, args.records, counts, args.seed)
    print(dataset.source_path)
    return 0


@catch_error
def cmd_run(args: argparse.Namespace) -> int:
    """Run the pipeline over a dataset; writes predictions.jsonl and manifest.json into --out"""
    blog = logging.getLogger('qvidlog')

    spec = _run_spec(args)
    dataset = load_normalized(args.dataset, spec.media_root)
    pipeline = Pipeline(spec.pipeline)

    blog.info(f'Running {dataset.dataset_name} ({len(dataset)} records) into {args.out}')
    result = pipeline.run_dataset(dataset.records, args.out, resume=args.resume, show_progress=not args.quiet)

    counts = result.manifest['counts']
    print(f'{path.join(args.out, "predictions.jsonl")}: {counts["predictions"]} predictions, '
          f'{counts["unparsed"]} unparsed, {counts["failed"]} failed')
    return 0


@catch_error
def cmd_eval(args: argparse.Namespace) -> int:
    """Score a predictions file against a dataset"""
    dataset = load_normalized(args.dataset, args.media_root, check_media=False)
    predictions = read_predictions(args.predictions)
    report = score(predictions, dataset, impute_seed=args.impute_seed)

    manifest_path = path.join(path.dirname(path.abspath(args.predictions)), MANIFEST_FILE)
    if path.isfile(manifest_path):
        with open(manifest_path, 'r', encoding='utf-8') as f:
            report.provenance['config'] = json.load(f).get('config')

    _write_or_print(render_report(report, args.format), args.report_out)
    return 0


@catch_error
def cmd_ablate(args: argparse.Namespace) -> int:
    """Run every captioning x QA template pair and print the matrix"""
    caption_ids = _id_list(args.caption_templates, '--caption-templates')
    qa_ids = _id_list(args.qa_templates, '--qa-templates')
    captioner_models = _id_list(args.captioner_models, '--captioner-models') if args.captioner_models else []

    spec = _run_spec(args)
    dataset = load_normalized(args.dataset, spec.media_root)

    matrix = ablate(dataset, caption_ids, qa_ids, spec.pipeline, args.out,
                    captioner_model_ids=captioner_models, show_progress=not args.quiet)

    with open(path.join(args.out, 'ablation.json'), 'w', encoding='utf-8', newline='\n') as f:
        f.write(render_report(matrix, 'json'))
    sys.stdout.write(render_report(matrix, args.format))
    return 0


@catch_error
def cmd_mock_serve(args: argparse.Namespace) -> int:
    """Serve the mock endpoints until Ctrl-C"""
    blog = logging.getLogger('qvidlog')

    server = serve(args.port, args.rig, args.delay, args.request_log, args.host)
    print(f'Mock server listening on {server.url}', flush=True)

    try:
        while server.is_alive():
            server.join(0.5)
    except KeyboardInterrupt:
        blog.info('Stopping mock server')
    finally:
        server.stop()
    return 0


@catch_error
def cmd_templates(args: argparse.Namespace) -> int:
    """list: one template per line; show: body byte-exact; dump: whole catalog in catalog format"""
    registry = DefaultTemplates()
    if args.catalog:
        registry.load_catalog(args.catalog)

    if args.action == 'list':
        kind = TemplateKind(args.kind) if args.kind else None
        for template in registry.list(kind):
            print(f'{template.template_id}\t{template.kind.value}\t{template.description}')
    elif args.action == 'show':
        if not args.template_id:
            raise UsageError('templates show needs a template id')
        sys.stdout.write(registry.get(args.template_id).body)
        sys.stdout.flush()
    else:
        _write_or_print(dump_catalog(registry.list()), args.out)
    return 0
