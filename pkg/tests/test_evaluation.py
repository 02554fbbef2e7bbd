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
import unittest

from qvid.core_types import Prediction, QARecord, SourceKind, VideoRef
from qvid.datasets import NormalizedDataset
from qvid.evaluation import AblationCell, AblationMatrix, EvalReport, ReportError, render_report, score


def record(i, gold, question_type=None, m=4):
    video = VideoRef(f'v{i}', SourceKind.FRAME_DIR, f'/frames/v{i}')
    return QARecord(f'r{i}', video, 'Why?', [f'option {k}' for k in range(m)], gold, question_type, 'unit')


def prediction(i, answer, failed=False):
    return Prediction(f'r{i}', answer, '' if answer is None else 'ABCD'[answer], 'dependent_base', 'qa_base',
                      'cap', 'llm', 64, failed)


class TestScore(unittest.TestCase):

    def test_micro_accuracy(self):
        dataset = NormalizedDataset([record(i, g) for i, g in enumerate([0, 1, 2, 3])], 'unit')
        report = score([prediction(0, 0), prediction(1, 1), prediction(2, 2), prediction(3, 0)], dataset)
        self.assertEqual(report.accuracy, 0.75)
        self.assertEqual(report.n_correct, 3)
        self.assertIsNone(report.macro_average)
        self.assertEqual(report.provenance['caption_template_id'], 'dependent_base')

    def test_unparsed_counts_as_wrong(self):
        dataset = NormalizedDataset([record(0, 0), record(1, 1)], 'unit')
        report = score([prediction(0, 0), prediction(1, None)], dataset)
        self.assertEqual(report.accuracy, 0.5)
        self.assertEqual(report.n_unparsed, 1)
        self.assertEqual(report.n_total, 2)

    def test_failed_predictions_are_counted_apart(self):
        dataset = NormalizedDataset([record(0, 0), record(1, 1)], 'unit')
        report = score([prediction(0, None), prediction(1, None, failed=True)], dataset)
        self.assertEqual((report.n_unparsed, report.n_failed, report.accuracy), (1, 1, 0.0))

    def test_per_type_and_macro(self):
        records = [record(0, 0, 'Temporal'), record(1, 0, 'Temporal'), record(2, 0, 'Causal'),
                   record(3, 0, 'Causal')]
        dataset = NormalizedDataset(records, 'unit')
        report = score([prediction(0, 0), prediction(1, 1), prediction(2, 0), prediction(3, 1)], dataset)
        self.assertEqual(report.per_type['Temporal'].accuracy, 0.5)
        self.assertEqual(report.per_type['Causal'].accuracy, 0.5)
        self.assertEqual(report.macro_average, 0.5)
        self.assertEqual(report.accuracy, 0.5)

    def test_type_columns_follow_fixed_order(self):
        records = [record(0, 0, 'Causal'), record(1, 0, 'Descriptive'), record(2, 0, 'Zoom'),
                   record(3, 0, 'Temporal'), record(4, 0, 'Aim'), record(5, 0, 'Causal')]
        dataset = NormalizedDataset(records, 'nextqa')
        report = score([prediction(i, 0) for i in range(6)], dataset)
        self.assertEqual(list(report.per_type), ['Temporal', 'Causal', 'Descriptive', 'Aim', 'Zoom'])
        self.assertRegex(render_report(report), r'Tem\.\s+Cau\.\s+Des\.\s+Aim\s+Zoom\s+Avg\.')
        self.assertEqual(list(json.loads(render_report(report, 'json'))['per_type']),
                         ['Temporal', 'Causal', 'Descriptive', 'Aim', 'Zoom'])

        records = [record(0, 0, 'Before&After'), record(1, 0, 'How'), record(2, 0, 'Why')]
        report = score([prediction(i, 0) for i in range(3)], NormalizedDataset(records, 'intentqa'))
        self.assertEqual(list(report.per_type), ['Why', 'How', 'Before&After'])

    def test_per_type_unparsed_adds_up(self):
        records = [record(0, 0, 'Temporal'), record(1, 0, 'Temporal'), record(2, 0, 'Causal'),
                   record(3, 0, 'Causal')]
        dataset = NormalizedDataset(records, 'unit')
        report = score([prediction(0, None), prediction(1, None, failed=True), prediction(2, None, failed=True),
                        prediction(3, 0)], dataset)
        self.assertEqual((report.n_unparsed, report.n_failed), (1, 2))
        self.assertEqual(report.per_type['Temporal'].unparsed, 1)
        self.assertEqual(report.per_type['Causal'].unparsed, 0)
        self.assertEqual(sum(s.unparsed for s in report.per_type.values()), report.n_unparsed)

    def test_macro_differs_from_micro_on_unbalanced_types(self):
        records = [record(0, 0, 'Temporal'), record(1, 0, 'Temporal'), record(2, 0, 'Temporal'),
                   record(3, 0, 'Causal')]
        dataset = NormalizedDataset(records, 'unit')
        report = score([prediction(0, 0), prediction(1, 0), prediction(2, 0), prediction(3, 1)], dataset)
        self.assertEqual(report.accuracy, 0.75)
        self.assertEqual(report.macro_average, 0.5)

    def test_mismatches_are_errors(self):
        dataset = NormalizedDataset([record(0, 0), record(1, 1)], 'unit')
        with self.assertRaises(ReportError):
            score([prediction(0, 0), prediction(5, 0)], dataset)
        with self.assertRaises(ReportError):
            score([prediction(0, 0), prediction(0, 0), prediction(1, 1)], dataset)
        with self.assertRaises(ReportError):
            score([prediction(0, 0)], dataset)

        unlabeled = NormalizedDataset([record(0, None)], 'unit')
        with self.assertRaises(ReportError):
            score([prediction(0, 0)], unlabeled)

    def test_imputation_is_seeded(self):
        dataset = NormalizedDataset([record(i, 0) for i in range(20)], 'unit')
        predictions = [prediction(i, None) for i in range(20)]
        first = score(predictions, dataset, impute_seed=3)
        second = score(predictions, dataset, impute_seed=3)
        self.assertEqual(first.n_imputed, 20)
        self.assertEqual(first.n_correct, second.n_correct)
        self.assertEqual(first.n_unparsed, 20)
        self.assertEqual(score(predictions, dataset).n_correct, 0)


class TestRender(unittest.TestCase):

    def typed_report(self):
        records = [record(0, 0, 'Temporal'), record(1, 0, 'Causal'), record(2, 0, 'Descriptive'),
                   record(3, 0, 'Descriptive')]
        dataset = NormalizedDataset(records, 'nextqa')
        return score([prediction(0, 0), prediction(1, 0), prediction(2, 0), prediction(3, None)], dataset)

    def test_plain_table(self):
        text = render_report(self.typed_report())
        self.assertEqual(text, (
            'Dataset: nextqa\n'
            'Records: 4  Correct: 3  Unparsed: 1  Failed: 0  Imputed: 0\n'
            '\n'
            '       Tem.   Cau.  Des.  Avg.  Macro\n'
            'Acc.  100.0  100.0  50.0  75.0   83.3\n'
            'n         1      1     2     4      -\n'
            '\n'
            'Parity: reference accuracy with full-size models is 66.3\n'))

    def test_plain_table_without_types(self):
        dataset = NormalizedDataset([record(0, 1), record(1, 1)], 'custom')
        text = render_report(score([prediction(0, 1), prediction(1, 0)], dataset))
        self.assertIn('      Overall\nAcc.     50.0\nn           2', text)
        self.assertNotIn('Parity', text)

    def test_json(self):
        obj = json.loads(render_report(self.typed_report(), 'json'))
        self.assertEqual(obj['schema_version'], 1)
        self.assertEqual(obj['kind'], 'report')
        self.assertEqual(obj['accuracy'], 0.75)
        self.assertEqual(obj['per_type']['Descriptive'], {'n': 2, 'correct': 1, 'unparsed': 1, 'accuracy': 0.5})

    def test_matrix(self):
        report = EvalReport('unit', n_total=2, n_correct=1)
        matrix = AblationMatrix('unit', [AblationCell('dependent_base', 'qa_base', 'cap', report, 10),
                                         AblationCell('general_v1_reconstructed', 'qa_base', 'cap', report, 10)])
        text = render_report(matrix)
        self.assertIn('Captioner  Captioning', text)
        self.assertIn('general_v1_reconstructed', text)
        obj = json.loads(render_report(matrix, 'json'))
        self.assertEqual(obj['kind'], 'ablation')
        self.assertEqual(len(obj['cells']), 2)
        self.assertIs(matrix.cell('dependent_base', 'qa_base'), matrix.cells[0])
        with self.assertRaises(KeyError):
            matrix.cell('dependent_base', 'qa_v1_reconstructed')

    def test_unknown_format(self):
        with self.assertRaises(ReportError):
            render_report(self.typed_report(), 'html')


if __name__ == '__main__':
    unittest.main()
