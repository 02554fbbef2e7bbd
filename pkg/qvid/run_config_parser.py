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

import codecs
import logging
import os
import shlex

from configparser import ConfigParser, Error as IniError
from dataclasses import dataclass
from os import path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from qvid.core_types import DecodeParams
from qvid.frame_sampler import SamplerConfig, SamplingStrategy
from qvid.model_client import EndpointConfig, InvalidRequest, WireProtocol
from qvid.pipeline import FailPolicy, PipelineConfig
from qvid.prompt_templates import JoinerMode
from qvid.utils.errorm import UsageError


class ConfigParseError(UsageError):
    pass


DEFAULT_CONFIG_FILE = path.join(path.dirname(path.abspath(__file__)), '../config/qvid.conf')

AUTH_TOKEN_ENV = 'QVID_AUTH_TOKEN'
ENV_PREFIX = 'QVID_'

DEFAULTS: Dict[str, Dict[str, str]] = {
    'SAMPLER': {
        'n_frames': '64',
        'strategy': 'centre',
        'image_max_side': '384',
        'image_format': 'JPEG',
        'jpeg_quality': '90',
        'frame_dir_fps': '3',
        'decoder_timeout': '600',
        'decoder_probe_cmd': '',
        'decoder_fps_cmd': '',
        'decoder_extract_cmd': ''
    },
    'TEMPLATES': {
        'caption_template': 'dependent_base',
        'qa_template': 'qa_base',
        'joiner': 'plain',
        'catalog_file': ''
    },
    'CAPTIONER': {
        'base_url': 'http://127.0.0.1:8000',
        'model_id': 'instructblip-flan-t5-xxl',
        'protocol': 'native',
        'timeout': '120',
        'max_retries': '3',
        'max_in_flight': '8'
    },
    'REASONER': {
        'base_url': 'http://127.0.0.1:8001',
        'model_id': 'flan-t5-xxl',
        'protocol': 'native',
        'timeout': '120',
        'max_retries': '3',
        'max_in_flight': '8'
    },
    'CAPTION_DECODE': {
        'max_new_tokens': '30',
        'top_p': '0.7',
        'seed': ''
    },
    'REASON_DECODE': {
        'max_new_tokens': '10',
        'top_p': '',
        'seed': ''
    },
    'RUN': {
        'cache_dir': '.qvid-cache',
        'cache_enabled': 'yes',
        'workers': '1',
        'fail_policy': 'abort',
        'media_root': ''
    }
}

# command line flag (argparse dest) -> (section, key)
FLAG_KEYS: Dict[str, Tuple[str, str]] = {
    'n_frames': ('SAMPLER', 'n_frames'),
    'caption_template': ('TEMPLATES', 'caption_template'),
    'qa_template': ('TEMPLATES', 'qa_template'),
    'joiner': ('TEMPLATES', 'joiner'),
    'catalog': ('TEMPLATES', 'catalog_file'),
    'captioner_url': ('CAPTIONER', 'base_url'),
    'captioner_model': ('CAPTIONER', 'model_id'),
    'captioner_protocol': ('CAPTIONER', 'protocol'),
    'max_in_flight': ('CAPTIONER', 'max_in_flight'),
    'reasoner_url': ('REASONER', 'base_url'),
    'reasoner_model': ('REASONER', 'model_id'),
    'reasoner_protocol': ('REASONER', 'protocol'),
    'caption_max_tokens': ('CAPTION_DECODE', 'max_new_tokens'),
    'caption_top_p': ('CAPTION_DECODE', 'top_p'),
    'caption_seed': ('CAPTION_DECODE', 'seed'),
    'cache_dir': ('RUN', 'cache_dir'),
    'cache_enabled': ('RUN', 'cache_enabled'),
    'workers': ('RUN', 'workers'),
    'fail_policy': ('RUN', 'fail_policy'),
    'media_root': ('RUN', 'media_root')
}


@dataclass(frozen=True)
class RunSpec:
    """Validated run settings: file < env < flags"""
    pipeline: PipelineConfig
    media_root: Optional[str] = None
    config_file: Optional[str] = None


class RunConfigParser:
    """
    Parse qvid.conf, overlay QVID_<SECTION>_<KEY> environment variables and flags, and
    validate everything into a RunSpec.

    Any invalid value raises ConfigParseError naming the section and key.
    """

    blog = logging.getLogger('qvidlog')

    def __init__(self, config_file: Optional[str] = None, environ: Optional[Mapping[str, str]] = None) -> None:
        self.environ = os.environ if environ is None else environ
        self.config_file = config_file
        if self.config_file is None and path.isfile(DEFAULT_CONFIG_FILE):
            self.config_file = path.abspath(DEFAULT_CONFIG_FILE)

        self.config = ConfigParser(interpolation=None)
        self.config.read_dict(DEFAULTS)

        if self.config_file is not None:
            self.blog.info(f'Reading run config {self.config_file}')
            if not path.isfile(self.config_file):
                msg = f"Couldn't find run config file: {self.config_file}"
                self.blog.fatal(msg)
                raise ConfigParseError(msg)
            try:
                with codecs.open(self.config_file, 'r', 'utf8') as f:
                    self.config.read_file(f)
            except IniError as e:
                raise ConfigParseError(f'{self.config_file}: {e}')

        for section in self.config.sections():
            if section not in DEFAULTS:
                raise ConfigParseError(f'Unknown config section [{section}]')
            for key in self.config[section]:
                if key not in DEFAULTS[section]:
                    raise ConfigParseError(f'Unknown config key [{section}] {key}')

        self._overlay_environment()

    def _overlay_environment(self) -> None:
        for section, keys in DEFAULTS.items():
            for key in keys:
                name = f'{ENV_PREFIX}{section}_{key}'.upper()
                if name in self.environ:
                    self.blog.debug(f'[{section}] {key} set from environment variable {name}')
                    self.config[section][key] = self.environ[name]

    def _overlay_flags(self, overrides: Mapping[str, Any]) -> None:
        for flag, value in overrides.items():
            if value is None or flag not in FLAG_KEYS:
                continue
            section, key = FLAG_KEYS[flag]
            if isinstance(value, bool):
                value = 'yes' if value else 'no'
            self.config[section][key] = str(value)

    def _get(self, section: str, key: str, convert: Callable[[str], Any], what: str) -> Any:
        raw = self.config[section][key].strip()
        try:
            return convert(raw)
        except (ValueError, TypeError):
            msg = f'[{section}] {key}: "{raw}" is not {what}'
            self.blog.fatal(msg)
            raise ConfigParseError(msg)

    def _positive_int(self, section: str, key: str) -> int:
        def convert(raw: str) -> int:
            value = int(raw)
            if value < 1:
                raise ValueError
            return value
        return self._get(section, key, convert, 'a positive integer')

    def _positive_float(self, section: str, key: str) -> float:
        def convert(raw: str) -> float:
            value = float(raw)
            if not value > 0:
                raise ValueError
            return value
        return self._get(section, key, convert, 'a positive number')

    def _optional_int(self, section: str, key: str) -> Optional[int]:
        return self._get(section, key, lambda raw: int(raw) if raw else None, 'an integer or empty')

    def _command(self, section: str, key: str, default: Tuple[str, ...]) -> Tuple[str, ...]:
        raw = self.config[section][key].strip()
        if not raw:
            return default
        try:
            return tuple(shlex.split(raw))
        except ValueError as e:
            raise ConfigParseError(f'[{section}] {key}: {e}')

    def _decode(self, section: str) -> DecodeParams:
        def top_p(raw: str) -> Optional[float]:
            if not raw:
                return None
            value = float(raw)
            if not 0.0 < value <= 1.0:
                raise ValueError
            return value

        return DecodeParams(
            max_new_tokens=self._positive_int(section, 'max_new_tokens'),
            top_p=self._get(section, 'top_p', top_p, 'a number in (0, 1] or empty'),
            seed=self._optional_int(section, 'seed')
        )

    def _endpoint(self, section: str) -> EndpointConfig:
        base_url = self.config[section]['base_url'].strip()
        if not base_url.startswith(('http://', 'https://')):
            raise ConfigParseError(f'[{section}] base_url: "{base_url}" is not an http(s) URL')

        try:
            return EndpointConfig(
                base_url=base_url,
                model_id=self.config[section]['model_id'].strip(),
                timeout=self._positive_float(section, 'timeout'),
                max_retries=self._get(section, 'max_retries', int, 'an integer'),
                max_in_flight=self._positive_int(section, 'max_in_flight'),
                auth_token=self.environ.get(AUTH_TOKEN_ENV) or None,
                protocol=self._get(section, 'protocol', WireProtocol, 'native or chat')
            )
        except InvalidRequest as e:
            raise ConfigParseError(f'[{section}] {e}')

    def _sampler(self) -> SamplerConfig:
        image_format = self.config['SAMPLER']['image_format'].strip().upper()
        if image_format not in ('JPEG', 'JPG', 'PNG'):
            raise ConfigParseError(f'[SAMPLER] image_format: "{image_format}" is not JPEG or PNG')

        defaults = SamplerConfig()
        return SamplerConfig(
            n_frames=self._positive_int('SAMPLER', 'n_frames'),
            strategy=self._get('SAMPLER', 'strategy', SamplingStrategy, 'centre or floor'),
            image_max_side=self._positive_int('SAMPLER', 'image_max_side'),
            image_format=image_format,
            jpeg_quality=self._positive_int('SAMPLER', 'jpeg_quality'),
            frame_dir_fps=self._positive_float('SAMPLER', 'frame_dir_fps'),
            probe_cmd=self._command('SAMPLER', 'decoder_probe_cmd', defaults.probe_cmd),
            fps_cmd=self._command('SAMPLER', 'decoder_fps_cmd', defaults.fps_cmd),
            extract_cmd=self._command('SAMPLER', 'decoder_extract_cmd', defaults.extract_cmd),
            decoder_timeout=self._positive_float('SAMPLER', 'decoder_timeout')
        )

    def parse(self, overrides: Optional[Mapping[str, Any]] = None) -> RunSpec:
        """Apply flag overrides (argparse dests, None = not given) and build the RunSpec"""
        self._overlay_flags(overrides or {})

        catalog_file = self.config['TEMPLATES']['catalog_file'].strip() or None
        if catalog_file is not None and not path.isfile(catalog_file):
            raise ConfigParseError(f'[TEMPLATES] catalog_file: {catalog_file} does not exist')

        templates = {}
        for key in ('caption_template', 'qa_template'):
            templates[key] = self.config['TEMPLATES'][key].strip()
            if not templates[key]:
                raise ConfigParseError(f'[TEMPLATES] {key} is empty')

        pipeline = PipelineConfig(
            captioner=self._endpoint('CAPTIONER'),
            reasoner=self._endpoint('REASONER'),
            sampler=self._sampler(),
            caption_template_id=templates['caption_template'],
            qa_template_id=templates['qa_template'],
            joiner=self._get('TEMPLATES', 'joiner', JoinerMode, 'plain or numbered'),
            caption_decode=self._decode('CAPTION_DECODE'),
            reason_decode=self._decode('REASON_DECODE'),
            cache_enabled=self._get('RUN', 'cache_enabled', self._boolean, 'a boolean'),
            cache_dir=self.config['RUN']['cache_dir'].strip() or DEFAULTS['RUN']['cache_dir'],
            fail_policy=self._get('RUN', 'fail_policy', FailPolicy, 'abort or skip_record'),
            workers=self._positive_int('RUN', 'workers'),
            catalog_file=catalog_file
        )

        media_root = self.config['RUN']['media_root'].strip() or None
        self.blog.debug(f'Resolved run config: {pipeline.to_dict()}')
        return RunSpec(pipeline, media_root, self.config_file)

    def _boolean(self, raw: str) -> bool:
        states = ConfigParser.BOOLEAN_STATES
        if raw.lower() not in states:
            raise ValueError
        return states[raw.lower()]
