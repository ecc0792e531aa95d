"""
Embedding Checkpoints
Reads and writes the layer-0 embedding table.

Layout: one ASCII header line 'M N O d seed', then the M user rows, the N bundle
rows and the O item rows. Text files hold d floats per line with 17 significant
digits; files ending in '.bin' hold the rows as little-endian float64 after the
header line.
"""
import os

import numpy as np

from services.errors import DataError
from services.views import EmbeddingTable

BINARY_SUFFIX = '.bin'


def save_checkpoint(theta, path, seed=0):
    """
    Write an embedding table

    Args:
        theta: EmbeddingTable
        path: destination; '.bin' selects the binary layout
        seed: run seed recorded in the header
    """
    num_users, num_bundles, num_items = theta.counts
    header = f"{num_users} {num_bundles} {num_items} {theta.dim} {seed}\n"
    rows = np.concatenate([theta.users, theta.bundles, theta.items]).astype(np.float64)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    if path.endswith(BINARY_SUFFIX):
        with open(path, 'wb') as handle:
            handle.write(header.encode('ascii'))
            handle.write(rows.astype('<f8').tobytes())
        return

    with open(path, 'w', encoding='ascii', newline='\n') as handle:
        handle.write(header)
        for row in rows:
            handle.write(' '.join('%.17g' % value for value in row) + '\n')


def _parse_header(line, path):
    parts = line.split()
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise DataError(f"{path}: malformed checkpoint header {line.strip()!r}") from None
    if len(values) != 5 or min(values[:4]) < 0:
        raise DataError(f"{path}: checkpoint header must be 'M N O d seed'")
    return values


def load_checkpoint(path, dtype=np.float64):
    """
    Read an embedding table

    Args:
        path: checkpoint file
        dtype: float dtype of the returned table

    Returns:
        tuple: (EmbeddingTable, seed)
    """
    if not os.path.isfile(path):
        raise DataError(f"Checkpoint not found: {path}")

    if path.endswith(BINARY_SUFFIX):
        with open(path, 'rb') as handle:
            num_users, num_bundles, num_items, dim, seed = _parse_header(
                handle.readline().decode('ascii'), path)
            payload = handle.read()
        total = num_users + num_bundles + num_items
        if len(payload) != total * dim * 8:
            raise DataError(f"{path}: expected {total * dim * 8} bytes of rows, found {len(payload)}")
        rows = np.frombuffer(payload, dtype='<f8').reshape(total, dim)
    else:
        with open(path, 'r', encoding='ascii') as handle:
            num_users, num_bundles, num_items, dim, seed = _parse_header(handle.readline(), path)
            total = num_users + num_bundles + num_items
            rows = np.zeros((total, dim), dtype=np.float64)
            count = 0
            for line_no, line in enumerate(handle, start=2):
                if not line.strip():
                    continue
                if count >= total:
                    raise DataError(f"{path}:{line_no}: more rows than the header declares")
                values = line.split()
                if len(values) != dim:
                    raise DataError(f"{path}:{line_no}: expected {dim} values, found {len(values)}")
                try:
                    rows[count] = [float(v) for v in values]
                except ValueError:
                    raise DataError(f"{path}:{line_no}: non-numeric value") from None
                count += 1
        if count != total:
            raise DataError(f"{path}: expected {total} rows, found {count}")

    theta = EmbeddingTable(
        users=rows[:num_users].astype(dtype),
        bundles=rows[num_users:num_users + num_bundles].astype(dtype),
        items=rows[num_users + num_bundles:].astype(dtype),
    )
    return theta, seed


def check_checkpoint_shape(theta, dataset):
    """
    Raise DataError unless the table matches the dataset's entity counts

    Both shapes are named in the message.
    """
    expected = (dataset.num_users, dataset.num_bundles, dataset.num_items)
    if theta.counts != expected:
        raise DataError(
            f"checkpoint has (users, bundles, items) = {theta.counts}, dataset has {expected}"
        )
