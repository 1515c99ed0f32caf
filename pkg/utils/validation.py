import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

from core.nets import BASELINE_VARIANTS, JIGSAW_VARIANTS, PE_MODES, TASKS, ModelConfig
from core.synthetic import SynthConfig


class ConfigError(ValueError):
    """Invalid configuration entry; ``line_number`` is None for command-line flags"""

    def __init__(self, key: str, message: str, line_number: Optional[int] = None):
        self.key = key
        self.line_number = line_number
        where = f"line {line_number}" if line_number is not None else "command line"
        super().__init__(f"config key '{key}' ({where}): {message}")


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _float_list(text: str) -> List[float]:
    return [float(t) for t in text.replace(',', ' ').split()]


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {list(options)}, got {value!r}")
        return value
    return parse


@dataclass(frozen=True)
class ConfigKey:
    section: str
    parse: Callable[[str], Any]
    default: Any
    check: Optional[Callable[[Any], bool]] = None
    constraint: str = ''


def _key(section, parse, default, check=None, constraint=''):
    return ConfigKey(section, parse, default, check, constraint)


REGISTRY: Dict[str, ConfigKey] = {
    # run
    'seed': _key('run', int, 0),
    'seeds': _key('run', int, 1, lambda v: v >= 1, 'seeds >= 1'),
    'out': _key('run', str, 'runs'),
    'manifest': _key('run', str, None),
    'lambdas': _key('run', _float_list, [], lambda v: all(x >= 0 for x in v), 'every lambda >= 0'),
    'folds': _key('run', int, 0, lambda v: v >= 0, 'folds >= 0'),
    'checkpoint': _key('run', str, None),
    'n_train': _key('run', int, 400, lambda v: v >= 1, 'n_train >= 1'),
    'n_test': _key('run', int, 200, lambda v: v >= 1, 'n_test >= 1'),
    # model
    'arch': _key('model', _choice(*(JIGSAW_VARIANTS + BASELINE_VARIANTS)), 'transformer'),
    'pe': _key('model', _choice(*PE_MODES), 'ppeg'),
    'task': _key('model', _choice(*TASKS), 'binary'),
    'classes': _key('model', int, 2, lambda v: v >= 2, 'classes >= 2'),
    'bins': _key('model', int, 4, lambda v: v >= 2, 'bins >= 2'),
    'embed_dim': _key('model', int, 128, lambda v: v >= 2, 'embed_dim >= 2'),
    'attn_dim': _key('model', int, 128, lambda v: v >= 1, 'attn_dim >= 1'),
    'lambda': _key('model', float, 1.0, lambda v: v >= 0, 'lambda >= 0'),
    'lr': _key('model', float, 5e-4, lambda v: v > 0, 'lr > 0'),
    'beta1': _key('model', float, 0.9, lambda v: 0 <= v < 1, '0 <= beta1 < 1'),
    'beta2': _key('model', float, 0.999, lambda v: 0 <= v < 1, '0 <= beta2 < 1'),
    'adam_eps': _key('model', float, 1e-8, lambda v: v > 0, 'adam_eps > 0'),
    'weight_decay': _key('model', float, 1e-4, lambda v: v >= 0, 'weight_decay >= 0'),
    'epochs': _key('model', int, None, lambda v: v >= 0, 'epochs >= 0'),
    'step_mode': _key('model', _choice('stacked', 'sequential'), 'stacked'),
    'shuffled_task_loss': _key('model', _bool, False),
    'precision': _key('model', _choice('float64', 'float32'), 'float64'),
    'lr_schedule': _key('model', _choice('constant', 'cosine'), 'constant'),
    'warmup_epochs': _key('model', int, 0, lambda v: v >= 0, 'warmup_epochs >= 0'),
    'eval_every': _key('model', int, 10, lambda v: v >= 1, 'eval_every >= 1'),
    'alpha': _key('model', float, 0.0, lambda v: 0 <= v <= 1, '0 <= alpha <= 1'),
    # synthetic data (dim doubles as the model input width)
    'grid': _key('synth', int, 12, lambda v: v >= 1, 'grid >= 1'),
    'dim': _key('synth', int, 64, lambda v: v >= 1, 'dim >= 1'),
    'delta': _key('synth', float, 0.6, lambda v: v >= 0, 'delta >= 0'),
    'noise': _key('synth', float, 1.0, lambda v: v >= 0, 'noise >= 0'),
    'blob_min': _key('synth', int, 2, lambda v: v >= 1, 'blob_min >= 1'),
    'blob_max': _key('synth', int, 4, lambda v: v >= 1, 'blob_max >= 1'),
    'pos_frac': _key('synth', float, 0.5, lambda v: 0 <= v <= 1, '0 <= pos_frac <= 1'),
    'hazard_scale': _key('synth', float, 0.0, lambda v: 0 <= v <= 50, '0 <= hazard_scale <= 50'),
    'censor_rate': _key('synth', float, 0.0, lambda v: 0 <= v <= 1, '0 <= censor_rate <= 1'),
}

DEFAULT_EPOCHS = {'binary': 200, 'multiclass': 200, 'survival': 20}


@dataclass
class RunConfig:
    """Fully resolved run: run-level settings plus the model and synthetic-data configurations"""

    command: str
    values: Dict[str, Any]
    model: ModelConfig
    synth: SynthConfig
    config_path: Optional[str] = None
    overrides: Dict[str, str] = field(default_factory=dict)

    def __getattr__(self, name: str) -> Any:
        values = self.__dict__.get('values', {})
        if name in values:
            return values[name]
        raise AttributeError(name)


class ConfigValidator:
    """Parses flat key=value configuration and validates run parameters"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def _convert(self, key: str, text: str, line_number: Optional[int]) -> Any:
        spec = REGISTRY.get(key)
        if spec is None:
            raise ConfigError(key, "unknown key", line_number)
        try:
            value = spec.parse(text)
        except ValueError as e:
            raise ConfigError(key, f"cannot parse value {text!r}: {e}", line_number) from None
        if spec.check is not None and not spec.check(value):
            raise ConfigError(key, f"value {value!r} violates {spec.constraint}", line_number)
        return value

    def parse_text(self, text: str) -> Dict[str, Tuple[Any, int]]:
        """key -> (value, line number) for every assignment in the text"""
        entries: Dict[str, Tuple[Any, int]] = {}
        for line_number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(line.split()[0], "expected key=value", line_number)
            key, value = (part.strip() for part in line.split('=', 1))
            if key in entries:
                self.logger.warning(f"Config key '{key}' repeated on line {line_number}; the later value wins")
            entries[key] = (self._convert(key, value, line_number), line_number)
        return entries

    def parse_config(self, path: Optional[Union[str, Path]] = None, flags: Optional[Dict[str, str]] = None,
                     command: str = 'train') -> RunConfig:
        """
        Resolve defaults, then the config file, then command-line flags

        Args:
            path: Optional key=value config file
            flags: Overrides from the command line (raw strings)
            command: Subcommand being configured

        Returns:
            RunConfig with ModelConfig and SynthConfig built from the resolved values
        """
        values = {key: spec.default for key, spec in REGISTRY.items()}
        lines: Dict[str, Optional[int]] = {}
        if path is not None:
            try:
                text = Path(path).read_text(encoding='utf-8')
            except OSError as e:
                self.logger.error(f"Error reading config {path}: {str(e)}")
                raise
            for key, (value, line_number) in self.parse_text(text).items():
                values[key] = value
                lines[key] = line_number
        for key, text in (flags or {}).items():
            values[key] = self._convert(key, text, None)
            lines[key] = None

        if values['epochs'] is None:
            values['epochs'] = DEFAULT_EPOCHS[values['task']]
        if values['blob_min'] > values['blob_max'] or values['blob_max'] > values['grid']:
            raise ConfigError('blob_max', "blob sides must satisfy 1 <= blob_min <= blob_max <= grid",
                              lines.get('blob_max', lines.get('blob_min')))

        try:
            model = self.model_config(values)
            synth = SynthConfig(grid=values['grid'], dim=values['dim'], delta=values['delta'], noise=values['noise'],
                                blob_min=values['blob_min'], blob_max=values['blob_max'], pos_frac=values['pos_frac'],
                                hazard_scale=values['hazard_scale'], censor_rate=values['censor_rate'],
                                seed=values['seed'])
        except ValueError as e:
            raise ConfigError('config', str(e)) from None

        if command in ('train', 'eval') and not values['manifest']:
            raise ConfigError('manifest', f"required by '{command}'")
        if command in ('eval', 'cam') and not values['checkpoint']:
            raise ConfigError('checkpoint', f"required by '{command}'")

        checks = self.validate_run_parameters(values)
        for warning in checks['warnings']:
            self.logger.warning(warning)
        return RunConfig(command=command, values=values, model=model, synth=synth,
                         config_path=None if path is None else str(path), overrides=dict(flags or {}))

    @staticmethod
    def model_config(values: Dict[str, Any]) -> ModelConfig:
        return ModelConfig(
            variant=values['arch'], input_dim=values['dim'], embed_dim=values['embed_dim'],
            attn_dim=values['attn_dim'], lam=values['lambda'], pe_mode=values['pe'], task=values['task'],
            num_classes=values['classes'], bins=values['bins'], lr=values['lr'],
            betas=(values['beta1'], values['beta2']), adam_eps=values['adam_eps'],
            weight_decay=values['weight_decay'], epochs=values['epochs'], step_mode=values['step_mode'],
            shuffled_task_loss=values['shuffled_task_loss'], precision=values['precision'],
            lr_schedule=values['lr_schedule'], warmup_epochs=values['warmup_epochs'],
            eval_every=values['eval_every'], alpha=values['alpha'], seed=values['seed'])

    def validate_run_parameters(self, values: Dict[str, Any]) -> Dict[str, Any]:
        """
        Sanity checks that do not block a run

        Returns:
            Validation results with 'is_valid', 'errors' and 'warnings'
        """
        results = {'is_valid': True, 'errors': [], 'warnings': []}
        if values['lambda'] > 10:
            results['warnings'].append(f"lambda={values['lambda']} lets the equivalence term dominate the task loss")
        if values['arch'] in BASELINE_VARIANTS and values['lambda'] > 0:
            results['warnings'].append(f"Baseline '{values['arch']}' is equivariant per instance; "
                                       f"its equivalence loss is identically zero")
        if values['arch'] in BASELINE_VARIANTS and values['pe'] == 'ppeg':
            results['warnings'].append(f"PPEG needs a slot grid and is ignored by the '{values['arch']}' baseline; "
                                       f"set pe=none or pe=sinusoidal")
        if values['warmup_epochs'] > values['epochs']:
            results['warnings'].append(f"warmup_epochs={values['warmup_epochs']} exceeds epochs={values['epochs']}")
        if values['task'] == 'survival' and values['censor_rate'] > 0.9:
            results['warnings'].append("Censoring above 90% leaves few comparable pairs for the C-index")
        if results['errors']:
            results['is_valid'] = False
        return results


def model_config_text(config: ModelConfig) -> str:
    """key=value lines that rebuild ``config`` through parse_config"""
    lines = [
        f"arch={config.variant}", f"pe={config.pe_mode}", f"task={config.task}",
        f"classes={config.num_classes}", f"bins={config.bins}", f"dim={config.input_dim}",
        f"embed_dim={config.embed_dim}", f"attn_dim={config.attn_dim}", f"lambda={config.lam!r}",
        f"lr={config.lr!r}", f"beta1={config.betas[0]!r}", f"beta2={config.betas[1]!r}",
        f"adam_eps={config.adam_eps!r}", f"weight_decay={config.weight_decay!r}", f"epochs={config.epochs}",
        f"step_mode={config.step_mode}", f"shuffled_task_loss={str(config.shuffled_task_loss).lower()}",
        f"precision={config.precision}", f"lr_schedule={config.lr_schedule}",
        f"warmup_epochs={config.warmup_epochs}", f"eval_every={config.eval_every}",
        f"alpha={config.alpha!r}", f"seed={config.seed}",
    ]
    return '\n'.join(lines) + '\n'
