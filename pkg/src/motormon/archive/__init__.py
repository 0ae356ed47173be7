"""Batched relational archive with remote replication."""

from .batch import DEFAULT_PERIOD, ArchiveBatch, Batcher, SpectrumRecord
from .csvio import export_csv, read_csv
from .replication import RemoteServer, Replicator
from .store import DATA_TABLES, Archiver, Store, read_journal, stores_identical

__all__ = [
    "DEFAULT_PERIOD",
    "DATA_TABLES",
    "ArchiveBatch",
    "Archiver",
    "Batcher",
    "RemoteServer",
    "Replicator",
    "SpectrumRecord",
    "Store",
    "export_csv",
    "read_csv",
    "read_journal",
    "stores_identical",
]
