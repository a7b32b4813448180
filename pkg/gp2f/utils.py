import os
import csv
import time
import hashlib
import dataclasses

from contextlib import contextmanager
from pathlib import Path

import numpy as np

from gp2f import logger, __version__
from gp2f.config import dump_json

MANIFEST_NAME = 'manifest.json'


def hash_bytestr_iter(bytesiter, hasher, ashexstr=False):
    for block in bytesiter:
        hasher.update(block)
    return (hasher.hexdigest() if ashexstr else hasher.digest())

def file_as_blockiter(afile, blocksize=65536):
    with afile:
        block = afile.read(blocksize)
        while len(block) > 0:
            yield block
            block = afile.read(blocksize)

def checksum(fname):
    """memory-efficient check sum (sha256), as hex string"""
    return hash_bytestr_iter(file_as_blockiter(open(fname, 'rb')), hashlib.sha256(), ashexstr=True)


def fmt(x):
    """17 significant digits: enough to round-trip any double"""
    if isinstance(x, (float, np.floating)):
        return format(float(x), '.17g')
    return str(x)


def ensure_dir(path):
    if not os.path.exists(path):
        logger.info(f'create directory: {path}')
        os.makedirs(path)
    elif not os.path.isdir(path):
        raise NotADirectoryError(path)
    return path


def write_csv(file, header, rows):
    logger.info(f'write {file}')
    with open(file, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(x) for x in row])


def read_csv(file):
    with open(file, newline='') as f:
        return list(csv.DictReader(f))


@dataclasses.dataclass
class RunManifest:
    """What is needed to re-run a command: resolved config, seeds, input digests."""
    command: str
    config: dict
    seeds: list
    inputs: dict = dataclasses.field(default_factory=dict)
    outputs: list = dataclasses.field(default_factory=list)
    wall_clock: float = 0.0
    version: str = __version__

    @classmethod
    def start(cls, command, config, seeds, inputs=()):
        digests = {str(p): checksum(p) for p in inputs}
        manifest = cls(command=command, config=config, seeds=list(seeds), inputs=digests)
        manifest._t0 = time.perf_counter()
        return manifest

    def add_output(self, path, name=None):
        self.outputs.append(name or os.path.basename(path))
        return path

    def save(self, out_dir):
        self.wall_clock = time.perf_counter() - getattr(self, '_t0', time.perf_counter())
        file = os.path.join(out_dir, MANIFEST_NAME)
        dump_json(dataclasses.asdict(self), file)
        return file


@contextmanager
def set_directory(path: Path):
    """Sets the cwd within the context

    Args:
        path (Path): The path to the cwd

    Yields:
        None
    """

    origin = Path().absolute()
    try:
        os.chdir(path)
        yield
    finally:
        os.chdir(origin)
