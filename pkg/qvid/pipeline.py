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
import datetime
import logging

from concurrent.futures import Future, ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from threading import Lock
from typing import Any, Dict, Iterable, List, Optional

from tqdm import tqdm

from qvid.answer_parser import parse_answer
from qvid.app_info import AppInfo
from qvid.caption_cache import CacheEntry, CaptionCache, make_key, now_iso
from qvid.core_types import (Caption, CaptionSet, Conflict, DecodeParams, InvalidRecord, Prediction, QARecord,
                             QvidError, text_digest)
from qvid.frame_sampler import SamplerConfig, extract, plan_for_video, probe, probe_fps
from qvid.model_client import (CAPTION_DECODE_DEFAULT, REASON_DECODE_DEFAULT, CaptionRequest, EndpointConfig,
                               GenerateRequest, ModelClient)
from qvid.prompt_templates import CaptionJoiner, DefaultTemplates, JoinerMode, TemplateKind, TemplateRegistry
from qvid.run_store import RunStore
from qvid.utils.errorm import ErrorManager

DEGENERATE_CAPTION_WORDS = 2


class EmptyInput(QvidError):
    pass


class FailPolicy(Enum):
    ABORT = 'abort'
    SKIP_RECORD = 'skip_record'


@dataclass(frozen=True)
class PipelineConfig:
    captioner: EndpointConfig
    reasoner: EndpointConfig
    sampler: SamplerConfig = SamplerConfig()
    caption_template_id: str = 'dependent_base'
    qa_template_id: str = 'qa_base'
    joiner: JoinerMode = JoinerMode.PLAIN
    caption_decode: DecodeParams = CAPTION_DECODE_DEFAULT
    reason_decode: DecodeParams = REASON_DECODE_DEFAULT
    cache_enabled: bool = True
    cache_dir: str = '.qvid-cache'
    fail_policy: FailPolicy = FailPolicy.ABORT
    workers: int = 1
    catalog_file: Optional[str] = None

    def __post_init__(self) -> None:
        if self.workers < 1:
            raise ValueError(f'workers must be >= 1, got {self.workers}')

    def replace(self, **changes: Any) -> 'PipelineConfig':
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        """Resolved config for manifests and reports; auth tokens are never included"""

        def plain(value: Any) -> Any:
            if isinstance(value, Enum):
                return value.value
            if isinstance(value, tuple):
                return [plain(v) for v in value]
            if isinstance(value, dict):
                return {k: plain(v) for k, v in value.items() if k != 'auth_token'}
            return value

        return plain(dataclasses.asdict(self))


@dataclass
class RunResult:
    predictions: List[Prediction]
    manifest: Dict[str, Any]
    out_dir: str


@dataclass
class CaptionStats:
    captions: int = 0
    truncated: int = 0
    degenerate: int = 0
    lock: Lock = field(default_factory=Lock, repr=False)

    def add(self, captions: Iterable[Caption]) -> None:
        with self.lock:
            for caption in captions:
                self.captions += 1
                if caption.truncated:
                    self.truncated += 1
                if len(caption.text.split()) <= DEGENERATE_CAPTION_WORDS:
                    self.degenerate += 1

    def to_dict(self) -> Dict[str, int]:
        with self.lock:
            return {'captions': self.captions, 'truncated': self.truncated, 'degenerate': self.degenerate}


class Pipeline:
    """
    Question-dependent captioning followed by text-only reasoning, per record and per dataset.

    Clients and cache may be passed in to share them between pipelines (ablations);
    otherwise they are created from the config.
    """

    blog = logging.getLogger('qvidlog')

    def __init__(self, cfg: PipelineConfig, registry: Optional[TemplateRegistry] = None,
                 captioner: Optional[ModelClient] = None, reasoner: Optional[ModelClient] = None,
                 cache: Optional[CaptionCache] = None) -> None:
        self.cfg = cfg
        self.registry = registry or DefaultTemplates()

        self.caption_template = self.registry.get(cfg.caption_template_id, TemplateKind.CAPTIONING)
        self.qa_template = self.registry.get(cfg.qa_template_id, TemplateKind.QA_TASK)
        self.joiner = CaptionJoiner(cfg.joiner)

        self.captioner = captioner or ModelClient(cfg.captioner)
        self.reasoner = reasoner or ModelClient(cfg.reasoner)

        self.cache: Optional[CaptionCache] = None
        if cfg.cache_enabled:
            self.cache = cache or CaptionCache(cfg.cache_dir)

        self.caption_stats = CaptionStats()

        self.blog.info(f'Pipeline ready: captioning template {self.caption_template.template_id}, '
                       f'QA template {self.qa_template.template_id}, {cfg.sampler.n_frames} frames')

    def describe_video(self, record: QARecord) -> CaptionSet:
        """Captions of the sampled frames of record's video under E = concat(B, Q), in frame order"""
        video = record.video
        sampler = self.cfg.sampler
        decode = self.cfg.caption_decode

        total = probe(video, sampler)
        fps = probe_fps(video, sampler) if video.has_clip else None
        indices = plan_for_video(video, total, sampler.n_frames, fps, sampler.strategy)
        frames = extract(video.with_total_frames(total), indices, sampler)

        instruction = self.registry.render_caption_instruction(self.caption_template.template_id,
                                                               record.question).text

        keys = [make_key(self.captioner.model_id, video.video_id, frame.source_index, instruction,
                         decode.max_new_tokens, decode.top_p, decode.seed, frame.digest) for frame in frames]

        captions: List[Optional[Caption]] = [None] * len(frames)
        missing = []
        for position, key in enumerate(keys):
            entry = self.cache.get(key) if self.cache is not None else None
            if entry is None:
                missing.append(position)
            else:
                captions[position] = Caption(position, entry.caption_text, entry.truncated)

        self.blog.debug(f'Record #{record.record_id}: {len(frames)} frames, '
                        f'{len(frames) - len(missing)} cached captions')

        slots = self.captioner.caption_batch([CaptionRequest(frames[p].image_bytes, instruction, decode)
                                              for p in missing])
        first_error = None
        for position, slot in zip(missing, slots):
            if not slot.ok:
                first_error = first_error or slot.error
                continue
            captions[position] = Caption(position, slot.result.text, slot.result.truncated)
            if self.cache is not None:
                key = keys[position]
                self.cache.put(key, CacheEntry(key, slot.result.text, slot.result.truncated, now_iso()))

        if first_error is not None:
            raise first_error

        question_hash = text_digest('' if self.caption_template.is_general else record.question)
        caption_set = CaptionSet(tuple(captions), video.video_id, question_hash)
        self.caption_stats.add(caption_set.captions)
        return caption_set

    def answer(self, record: QARecord, captions: CaptionSet) -> Prediction:
        """Render L = concat(C, Q, A, T), ask the reasoner and parse its letter"""
        prompt = self.registry.render_qa_prompt(self.qa_template.template_id, captions, record, self.joiner)
        result = self.reasoner.generate(GenerateRequest(prompt.text, self.cfg.reason_decode))
        answer_index = parse_answer(result.text, record.m, record.options)

        if answer_index is None:
            self.blog.info(f'Record #{record.record_id}: unparsed reasoner output {result.text[:60]!r}')

        return self._prediction(record, answer_index, result.text, len(captions))

    def _prediction(self, record: QARecord, answer_index: Optional[int], raw_text: str, n_frames: int,
                    failed: bool = False) -> Prediction:
        return Prediction(
            record_id=record.record_id,
            answer_index=answer_index,
            raw_text=raw_text,
            caption_template_id=self.caption_template.template_id,
            qa_template_id=self.qa_template.template_id,
            captioner_model_id=self.captioner.model_id,
            reasoner_model_id=self.reasoner.model_id,
            n_frames=n_frames,
            failed=failed
        )

    def process(self, record: QARecord) -> Prediction:
        """describe_video + answer with the configured fail policy"""
        try:
            return self.answer(record, self.describe_video(record))
        except QvidError as e:
            if self.cfg.fail_policy == FailPolicy.ABORT:
                self.blog.error(f'Record #{record.record_id} failed, aborting: {e}')
                raise
            self.blog.warning(f'Record #{record.record_id} failed, skipping: {type(e).__name__}: {e}')
            ErrorManager().report_exception(e, record.record_id)
            return self._prediction(record, None, '', 0, failed=True)

    def _check_resumable(self, completed: Dict[str, Prediction]) -> None:
        ours = self._prediction_provenance()
        for prediction in completed.values():
            theirs = (prediction.caption_template_id, prediction.qa_template_id,
                      prediction.captioner_model_id, prediction.reasoner_model_id)
            if ours != theirs:
                raise Conflict(f'Output directory holds predictions made with {theirs}, not {ours}; '
                               f'use a fresh output directory or drop --resume')

    def _prediction_provenance(self) -> tuple:
        return (self.caption_template.template_id, self.qa_template.template_id,
                self.captioner.model_id, self.reasoner.model_id)

    def run_dataset(self, records: Iterable[QARecord], out_dir: str, resume: bool = False,
                    show_progress: bool = False) -> RunResult:
        """
        Process every record and write predictions.jsonl (dataset order) and manifest.json.

        Finished records are appended to completed.jsonl as they complete; with resume=True
        those are not processed again. Ctrl-C stops taking new records, waits for the running
        ones, writes the manifest with "interrupted": true and re-raises.
        """

        records = list(records)
        if not records:
            raise EmptyInput('No records to process')

        ids = set()
        for record in records:
            if record.record_id in ids:
                raise InvalidRecord(f'Duplicate record #{record.record_id}')
            ids.add(record.record_id)

        store = RunStore(out_dir)
        if resume:
            completed = {k: v for k, v in store.load_completed().items() if k in ids}
            self._check_resumable(completed)
        else:
            store.reset()
            completed = {}

        ErrorManager().bind(store.errors_path)

        pending = [r for r in records if r.record_id not in completed]
        results: Dict[str, Prediction] = dict(completed)
        results_lock = Lock()
        started_at = now_iso()

        self.blog.info(f'Running {len(pending)} of {len(records)} records into {out_dir} '
                       f'with {self.cfg.workers} workers')

        progress = tqdm(total=len(records), initial=len(completed), unit='record', disable=not show_progress)

        def keep(prediction: Prediction) -> None:
            with results_lock:
                if prediction.record_id in results:
                    return
                results[prediction.record_id] = prediction
            store.append(prediction)
            progress.update(1)

        futures: List[Future] = []
        status = 'completed'
        try:
            with ThreadPoolExecutor(max_workers=self.cfg.workers, thread_name_prefix='record') as pool:
                futures = [pool.submit(self.process, r) for r in pending]
                try:
                    for future in as_completed(futures):
                        keep(future.result())
                except BaseException:
                    for future in futures:
                        future.cancel()
                    raise
        except KeyboardInterrupt:
            status = 'interrupted'
            self.blog.warning('Interrupted, running records were drained')
            raise
        except BaseException:
            status = 'aborted'
            raise
        finally:
            for future in futures:
                if future.done() and not future.cancelled() and future.exception() is None:
                    keep(future.result())
            progress.close()

            predictions = [results[r.record_id] for r in records if r.record_id in results]
            if status == 'completed':
                store.write_predictions(predictions)

            manifest = self._manifest(records, predictions, len(completed), started_at, status)
            store.write_manifest(manifest)
            ErrorManager().bind(None)

        self.blog.info(f'Run finished: {len(predictions)} predictions in {store.predictions_path}')
        return RunResult(predictions, manifest, out_dir)

    def _manifest(self, records: List[QARecord], predictions: List[Prediction], resumed: int,
                  started_at: str, status: str) -> Dict[str, Any]:
        cache_stats = self.cache.stats() if self.cache is not None else {'hits': 0, 'misses': 0}
        captioner_stats = self.captioner.stats()
        reasoner_stats = self.reasoner.stats()

        return {
            'app': AppInfo().to_dict(),
            'status': status,
            'interrupted': status == 'interrupted',
            'started_at': started_at,
            'finished_at': datetime.datetime.now(datetime.timezone.utc).isoformat(timespec='seconds'),
            'config': self.cfg.to_dict(),
            'templates': {
                'captioning': {'id': self.caption_template.template_id, 'body': self.caption_template.body},
                'qa_task': {'id': self.qa_template.template_id, 'body': self.qa_template.body}
            },
            'models': {'captioner': self.captioner.model_id, 'reasoner': self.reasoner.model_id},
            'counts': {
                'records': len(records),
                'predictions': len(predictions),
                'resumed': resumed,
                'parsed': sum(1 for p in predictions if p.parsed),
                'unparsed': sum(1 for p in predictions if not p.parsed and not p.failed),
                'failed': sum(1 for p in predictions if p.failed)
            },
            'captions': dict(self.caption_stats.to_dict(),
                             cache_hits=cache_stats['hits'],
                             cache_misses=cache_stats['misses'],
                             captioner_requests=captioner_stats['requests_sent'],
                             captioner_retries=captioner_stats['retries']),
            'reasoner': {'requests': reasoner_stats['requests_sent'], 'retries': reasoner_stats['retries']}
        }
