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
import json
import logging
import random

from dataclasses import dataclass, field
from os import path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

from qvid.core_types import Prediction, QvidError
from qvid.datasets import NormalizedDataset
from qvid.model_client import EndpointConfig, ModelClient
from qvid.pipeline import Pipeline, PipelineConfig
from qvid.caption_cache import CaptionCache
from qvid.prompt_templates import DefaultTemplates, TemplateKind, TemplateRegistry

REPORT_SCHEMA_VERSION = 1

TYPE_COLUMNS = {
    'Temporal': 'Tem.',
    'Causal': 'Cau.',
    'Descriptive': 'Des.',
    'Interaction': 'Int.',
    'Sequence': 'Seq.',
    'Prediction': 'Pre.',
    'Feasibility': 'Fea.'
}

# Report column order; types not listed here follow in sorted order
TYPE_ORDER = ('Temporal', 'Causal', 'Descriptive', 'Interaction', 'Sequence', 'Prediction', 'Feasibility',
              'Why', 'How', 'Before&After')

# Reference accuracies (%) reported for full-size captioner and reasoner models
PARITY_TARGETS = {
    'nextqa': 66.3,
    'star': 45.7,
    'how2qa': 71.4,
    'tvqa': 41.0,
    'intentqa': 63.6
}


class ReportError(QvidError):
    pass


@dataclass
class TypeStats:
    n: int = 0
    correct: int = 0
    unparsed: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {'n': self.n, 'correct': self.correct, 'unparsed': self.unparsed, 'accuracy': self.accuracy}


@dataclass
class EvalReport:
    """
    Scores of one prediction set. accuracy is the micro average (correct / total),
    macro_average the unweighted mean of per-type accuracies (None for untyped data).
    """

    dataset_name: str
    n_total: int = 0
    n_correct: int = 0
    n_unparsed: int = 0
    n_failed: int = 0
    n_imputed: int = 0
    per_type: Dict[str, TypeStats] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_total if self.n_total else 0.0

    @property
    def macro_average(self) -> Optional[float]:
        if not self.per_type:
            return None
        return sum(s.accuracy for s in self.per_type.values()) / len(self.per_type)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'dataset_name': self.dataset_name,
            'n_total': self.n_total,
            'n_correct': self.n_correct,
            'n_unparsed': self.n_unparsed,
            'n_failed': self.n_failed,
            'n_imputed': self.n_imputed,
            'accuracy': self.accuracy,
            'macro_average': self.macro_average,
            'per_type': {name: stats.to_dict() for name, stats in self.per_type.items()},
            'provenance': self.provenance
        }


def _imputed_guess(seed: int, record_id: str, m: int) -> int:
    return random.Random(f'{seed}:{record_id}').randrange(m)


def ordered_types(names: Iterable[str]) -> List[str]:
    """Question types in report column order"""
    present = set(names)
    known = [name for name in TYPE_ORDER if name in present]
    return known + sorted(present - set(known))


def score(predictions: Iterable[Prediction], dataset: NormalizedDataset,
          impute_seed: Optional[int] = None) -> EvalReport:
    """
    Score predictions against gold labels.

    Unparsed (and failed) predictions count as incorrect. With impute_seed, each of them
    gets a random guess seeded by (impute_seed, record_id) instead; n_imputed counts those.
    """

    blog = logging.getLogger('qvidlog')
    records = dataset.by_id()
    report = EvalReport(dataset.dataset_name)

    for name in ordered_types(dataset.question_types):
        report.per_type[name] = TypeStats()

    seen = set()
    for prediction in predictions:
        record = records.get(prediction.record_id)
        if record is None:
            raise ReportError(f'Prediction for unknown record #{prediction.record_id}')
        if prediction.record_id in seen:
            raise ReportError(f'Two predictions for record #{prediction.record_id}')
        if record.gold_index is None:
            raise ReportError(f'Record #{record.record_id} has no gold label')
        seen.add(prediction.record_id)

        if not report.provenance:
            report.provenance = {
                'caption_template_id': prediction.caption_template_id,
                'qa_template_id': prediction.qa_template_id,
                'captioner_model_id': prediction.captioner_model_id,
                'reasoner_model_id': prediction.reasoner_model_id
            }

        answer_index = prediction.answer_index
        unparsed = answer_index is None
        if unparsed and impute_seed is not None:
            answer_index = _imputed_guess(impute_seed, record.record_id, record.m)
            report.n_imputed += 1

        correct = answer_index is not None and answer_index == record.gold_index

        report.n_total += 1
        report.n_correct += correct
        unparsed_answer = unparsed and not prediction.failed
        report.n_unparsed += unparsed_answer
        report.n_failed += prediction.failed

        if record.question_type is not None:
            stats = report.per_type[record.question_type]
            stats.n += 1
            stats.correct += correct
            stats.unparsed += unparsed_answer

    missing = len(records) - len(seen)
    if missing:
        raise ReportError(f'{missing} records of {dataset.dataset_name} have no prediction')

    blog.info(f'Scored {report.n_total} predictions of {dataset.dataset_name}: '
              f'accuracy {report.accuracy:.4f}, {report.n_unparsed} unparsed')
    return report


@dataclass
class AblationCell:
    caption_template_id: str
    qa_template_id: str
    captioner_model_id: str
    report: EvalReport
    captioner_requests: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'caption_template_id': self.caption_template_id,
            'qa_template_id': self.qa_template_id,
            'captioner_model_id': self.captioner_model_id,
            'captioner_requests': self.captioner_requests,
            'report': self.report.to_dict()
        }


@dataclass
class AblationMatrix:
    dataset_name: str
    cells: List[AblationCell] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def cell(self, caption_template_id: str, qa_template_id: str,
             captioner_model_id: Optional[str] = None) -> AblationCell:
        for c in self.cells:
            if (c.caption_template_id == caption_template_id and c.qa_template_id == qa_template_id
                    and captioner_model_id in (None, c.captioner_model_id)):
                return c
        raise KeyError((caption_template_id, qa_template_id, captioner_model_id))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'dataset_name': self.dataset_name,
            'config': self.config,
            'cells': [c.to_dict() for c in self.cells]
        }


def ablate(dataset: NormalizedDataset, caption_template_ids: Sequence[str], qa_template_ids: Sequence[str],
           cfg: PipelineConfig, out_dir: str, registry: Optional[TemplateRegistry] = None,
           captioner_model_ids: Sequence[str] = (), reasoner: Optional[ModelClient] = None,
           show_progress: bool = False) -> AblationMatrix:
    """
    Run the pipeline and score it for every (captioning template, QA template) pair.

    All ids are resolved before any inference. Cells share one caption cache, so QA template
    variants reuse the captions of their captioning template. captioner_model_ids repeats
    the matrix for several captioner models served at the same endpoint.
    """

    blog = logging.getLogger('qvidlog')
    registry = registry or DefaultTemplates()

    if not caption_template_ids or not qa_template_ids:
        raise ReportError('Ablation needs at least one captioning and one QA template')

    caption_ids = [registry.get(t, TemplateKind.CAPTIONING).template_id for t in caption_template_ids]
    qa_ids = [registry.get(t, TemplateKind.QA_TASK).template_id for t in qa_template_ids]

    cfg = cfg.replace(cache_enabled=True)
    cache = CaptionCache(cfg.cache_dir)
    reasoner = reasoner or ModelClient(cfg.reasoner)

    endpoints: List[EndpointConfig] = [cfg.captioner]
    if captioner_model_ids:
        endpoints = [dataclasses.replace(cfg.captioner, model_id=model_id)
                     for model_id in captioner_model_ids]

    blog.info(f'Ablating {len(caption_ids)} captioning x {len(qa_ids)} QA templates '
              f'x {len(endpoints)} captioners over {len(dataset)} records')

    matrix = AblationMatrix(dataset.dataset_name, config=cfg.to_dict())
    for endpoint in endpoints:
        captioner = ModelClient(endpoint)
        for caption_id in caption_ids:
            for qa_id in qa_ids:
                cell_cfg = cfg.replace(captioner=endpoint, caption_template_id=caption_id, qa_template_id=qa_id)
                name = f'{caption_id}__{qa_id}'
                if len(endpoints) > 1:
                    name = f'{endpoint.model_id}__{name}'.replace('/', '_')

                before = captioner.stats()['requests_sent']
                pipeline = Pipeline(cell_cfg, registry, captioner, reasoner, cache)
                result = pipeline.run_dataset(dataset.records, path.join(out_dir, 'cells', name),
                                              show_progress=show_progress)
                report = score(result.predictions, dataset)

                matrix.cells.append(AblationCell(caption_id, qa_id, endpoint.model_id, report,
                                                 captioner.stats()['requests_sent'] - before))

    return matrix


def _percent(value: Optional[float]) -> str:
    return '-' if value is None else f'{100 * value:.1f}'


def _type_header(per_type: Dict[str, TypeStats]) -> List[str]:
    return [TYPE_COLUMNS.get(name, name) for name in per_type]


def _table(rows: List[List[str]], text_columns: int = 1) -> str:
    """Text columns left aligned, numbers right aligned"""
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for row in rows:
        cells = [cell.ljust(widths[i]) if i < text_columns else cell.rjust(widths[i]) for i, cell in enumerate(row)]
        lines.append('  '.join(cells).rstrip())
    return '\n'.join(lines)


def _accuracy_columns(report: EvalReport) -> List[str]:
    if not report.per_type:
        return [_percent(report.accuracy)]
    return ([_percent(s.accuracy) for s in report.per_type.values()]
            + [_percent(report.accuracy), _percent(report.macro_average)])


def _header(report: EvalReport) -> List[str]:
    if not report.per_type:
        return ['Overall']
    return _type_header(report.per_type) + ['Avg.', 'Macro']


def _plain_report(report: EvalReport) -> str:
    lines = [
        f'Dataset: {report.dataset_name}',
        f'Records: {report.n_total}  Correct: {report.n_correct}  Unparsed: {report.n_unparsed}  '
        f'Failed: {report.n_failed}  Imputed: {report.n_imputed}',
        ''
    ]

    n_row = ['n'] + ([str(s.n) for s in report.per_type.values()] + [str(report.n_total), '-']
                     if report.per_type else [str(report.n_total)])
    lines.append(_table([[''] + _header(report), ['Acc.'] + _accuracy_columns(report), n_row]))

    target = PARITY_TARGETS.get(report.dataset_name.lower().replace('-', ''))
    if target is not None:
        lines += ['', f'Parity: reference accuracy with full-size models is {target:.1f}']

    return '\n'.join(lines) + '\n'


def _plain_matrix(matrix: AblationMatrix) -> str:
    lines = [f'Dataset: {matrix.dataset_name}', '']
    if not matrix.cells:
        return '\n'.join(lines) + '\n'

    header = ['Captioner', 'Captioning', 'QA'] + _header(matrix.cells[0].report)
    rows = [header]
    for cell in matrix.cells:
        rows.append([cell.captioner_model_id, cell.caption_template_id, cell.qa_template_id]
                    + _accuracy_columns(cell.report))
    lines.append(_table(rows, text_columns=3))
    return '\n'.join(lines) + '\n'


def render_report(obj: Union[EvalReport, AblationMatrix], fmt: str = 'plain') -> str:
    """Plain-text table (type columns, then Avg. and Macro) or a JSON document"""
    if fmt == 'json':
        kind = 'ablation' if isinstance(obj, AblationMatrix) else 'report'
        document = dict(schema_version=REPORT_SCHEMA_VERSION, kind=kind, **obj.to_dict())
        return json.dumps(document, indent=2, ensure_ascii=False) + '\n'
    if fmt != 'plain':
        raise ReportError(f'Unknown report format "{fmt}"')

    if isinstance(obj, AblationMatrix):
        return _plain_matrix(obj)
    return _plain_report(obj)
