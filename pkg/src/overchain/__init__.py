"""overchain: a deterministic simulator and ledger library for a cluster-managed
lightweight blockchain overlay connecting vehicles, manufacturers, cloud storage,
and service providers."""

__version__ = "0.1.0"
