import os, json
import dataclasses
import typing

from rapidfuzz import process, fuzz

from gp2f import logger
from gp2f.errors import ConfigError

# data directory location
HOME = os.environ.get('HOME', os.path.expanduser('~'))
DATA_HOME = os.environ.get('XDG_DATA_HOME', os.path.join(HOME, '.local', 'share'))


def data_dir():
    """default data root: $GP2F_DATA_DIR, else $XDG_DATA_HOME/gp2f"""
    return os.environ.get('GP2F_DATA_DIR', os.path.join(DATA_HOME, 'gp2f'))


SUGGEST_CUTOFF = 60


def suggest(word, choices, cutoff=SUGGEST_CUTOFF):
    """closest match of `word` among `choices`, or None

    >>> suggest('tau_ctrl', ['tau_ctr', 'tau_fus', 'lambda_ctr'])
    'tau_ctr'
    """
    match = process.extractOne(word, list(choices), scorer=fuzz.ratio, score_cutoff=cutoff)
    return match[0] if match else None


def unknown_key_message(key, known, where):
    guess = suggest(key, known)
    hint = f" (did you mean {guess!r}?)" if guess else ''
    return f"unknown key {key!r} in {where}{hint}"


def _field_types(cls):
    try:
        return typing.get_type_hints(cls)
    except Exception:
        return {f.name: f.type for f in dataclasses.fields(cls)}


def _nested_dataclass(hint):
    if dataclasses.is_dataclass(hint):
        return hint
    for arg in typing.get_args(hint):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, data, where=None):
    """Build dataclass `cls` from a JSON mapping.

    Unknown keys are errors (they are typos in hyperparameter names more often
    than not); nested dataclass fields are built recursively; missing keys take
    the dataclass defaults.
    """
    where = where or cls.__name__
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object, got {type(data).__name__}")
    known = [f.name for f in dataclasses.fields(cls)]
    for key in data:
        if key not in known:
            raise ConfigError(unknown_key_message(key, known, where))
    types = _field_types(cls)
    kwargs = {}
    for key, value in data.items():
        nested = _nested_dataclass(types.get(key))
        if nested is not None and isinstance(value, dict):
            value = from_dict(nested, value, where=f'{where}.{key}')
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        obj = cls(**kwargs)
    except TypeError as error:
        raise ConfigError(f"{where}: {error}")
    if hasattr(obj, 'validate'):
        obj.validate()
    return obj


def to_dict(obj):
    data = dataclasses.asdict(obj)
    def _plain(v):
        if isinstance(v, dict):
            return {k: _plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [_plain(x) for x in v]
        return v
    return _plain(data)


def load_config(cls, file):
    if file is None:
        obj = cls()
        if hasattr(obj, 'validate'):
            obj.validate()
        return obj
    logger.info(f'load {cls.__name__} from {file}')
    try:
        with open(file) as f:
            js = json.load(f)
    except json.JSONDecodeError as error:
        raise ConfigError(f"{file}: invalid JSON ({error})")
    except OSError as error:
        raise ConfigError(f"{file}: {error.strerror}")
    return from_dict(cls, js, where=os.path.basename(file))


def dump_json(data, file):
    with open(file, 'w') as f:
        json.dump(data, f, sort_keys=True, indent=2, separators=(',', ': '))
        f.write('\n')


def save_config(obj, file):
    logger.info(f'save config file: {file}')
    dump_json(to_dict(obj), file)
