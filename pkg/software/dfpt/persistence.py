"""
Ground-state and response files: `.npz` containers of named arrays plus a
JSON metadata entry. Archive members carry fixed timestamps and a fixed
order, so writing the same state twice produces identical bytes.
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import polars as pl

from dfpt.eigensolver import SpectrumSlice
from dfpt.groundstate import BandPolicy, ChannelState, GroundState
from dfpt.model import LocalPotential, build_basis, build_hamiltonian
from dfpt.reports import SCHEMA, SolverReport, from_frame, to_frame
from dfpt.response import ResponseResult
from dfpt.smearing import SmearingScheme

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
GROUNDSTATE_KIND = "dfpt-groundstate"
RESPONSE_KIND = "dfpt-response"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    """A file is not a container this version can read."""


def write_arrays(path: Path, arrays: dict[str, np.ndarray], metadata: dict[str, Any]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = dict(arrays)
    entries["format_version"] = np.array(FORMAT_VERSION, dtype=np.int64)
    entries["metadata"] = np.array(json.dumps(metadata, sort_keys=True))

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(entries):
            buffer = io.BytesIO()
            np.lib.format.write_array(
                buffer, np.asarray(entries[name]), allow_pickle=False
            )
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            archive.writestr(info, buffer.getvalue())
    logger.debug(f"Wrote {len(entries)} arrays to {path}")


def read_arrays(path: Path, kind: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    with np.load(path, allow_pickle=False) as data:
        arrays = {name: data[name] for name in data.files}

    if "format_version" not in arrays or "metadata" not in arrays:
        raise FormatError(f"{path} is not a dfpt container")
    version = int(arrays.pop("format_version").item())
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{path} has format version {version}, expected {FORMAT_VERSION}"
        )
    metadata = json.loads(str(arrays.pop("metadata").item()))
    if metadata.get("kind") != kind:
        raise FormatError(f"{path} holds '{metadata.get('kind')}', expected '{kind}'")
    return arrays, metadata


def save_groundstate(gs: GroundState, path: Path, extra_metadata: dict | None = None):
    basis = gs.basis
    arrays: dict[str, np.ndarray] = {}
    channels_meta = []
    for k, state in enumerate(gs.channels):
        spectrum = state.spectrum
        prefix = f"channel{k}"
        arrays[f"{prefix}.vectors"] = spectrum.vectors
        arrays[f"{prefix}.eigenvalues"] = spectrum.eigenvalues
        arrays[f"{prefix}.residual_norms"] = spectrum.residual_norms
        arrays[f"{prefix}.converged"] = spectrum.converged
        arrays[f"{prefix}.occupations"] = gs.occupations(k)
        arrays[f"{prefix}.potential"] = state.channel.potential.as_array()
        channels_meta.append(
            {
                "weight": state.channel.weight,
                "f_max": state.channel.f_max,
                "n_occ": spectrum.n_occ,
                "n_conv": state.n_conv,
                "iterations": spectrum.iterations,
                "h_applies": spectrum.h_applies,
            }
        )

    metadata = {
        "kind": GROUNDSTATE_KIND,
        "basis": {
            "cell_length": basis.cell_length,
            "ecut": basis.ecut,
            "n_max": basis.n_max,
        },
        "smearing": {
            "kind": str(gs.smearing.kind),
            "temperature": gs.smearing.temperature,
        },
        "fermi_level": gs.fermi_level,
        "n_el": gs.n_el,
        "band_policy": gs.band_policy.to_dict(),
        "band_policy_scope": "per-channel",
        "eigensolver_tol": gs.eigensolver_tol,
        "seed": gs.seed,
        "channels": channels_meta,
    } | (extra_metadata or {})
    write_arrays(path, arrays, metadata)
    logger.info(f"Saved ground state ({len(gs.channels)} channels) to {path}")


def load_groundstate(path: Path) -> GroundState:
    arrays, metadata = read_arrays(path, GROUNDSTATE_KIND)
    basis_meta = metadata["basis"]
    basis = build_basis(basis_meta["cell_length"], basis_meta["ecut"])
    if basis.n_max != basis_meta["n_max"]:
        raise FormatError(
            f"{path}: basis descriptor does not rebuild to the stored size"
        )

    states = []
    for k, meta in enumerate(metadata["channels"]):
        prefix = f"channel{k}"
        channel = build_hamiltonian(
            basis,
            LocalPotential.from_array(arrays[f"{prefix}.potential"]),
            weight=meta["weight"],
            f_max=meta["f_max"],
        )
        spectrum = SpectrumSlice(
            vectors=arrays[f"{prefix}.vectors"],
            eigenvalues=arrays[f"{prefix}.eigenvalues"],
            residual_norms=arrays[f"{prefix}.residual_norms"],
            converged=arrays[f"{prefix}.converged"],
            n_occ=meta["n_occ"],
            iterations=meta["iterations"],
            h_applies=meta["h_applies"],
        )
        states.append(
            ChannelState(channel=channel, spectrum=spectrum, n_conv=meta["n_conv"])
        )

    return GroundState(
        channels=states,
        smearing=SmearingScheme(
            metadata["smearing"]["kind"], metadata["smearing"]["temperature"]
        ),
        fermi_level=metadata["fermi_level"],
        n_el=metadata["n_el"],
        band_policy=BandPolicy(**metadata["band_policy"]),
        eigensolver_tol=metadata["eigensolver_tol"],
        seed=metadata["seed"],
    )


@dataclass(frozen=True)
class StoredResponse:
    """A response file read back: the density response and per-channel pieces."""

    drho: np.ndarray
    deF: float
    w: list[np.ndarray]
    df: list[np.ndarray]
    dphi_q: list[np.ndarray]
    reports: list[SolverReport]
    metadata: dict[str, Any]


def save_response(
    result: ResponseResult, path: Path, extra_metadata: dict | None = None
):
    arrays: dict[str, np.ndarray] = {"drho": result.drho}
    for k, channel in enumerate(result.channels):
        arrays[f"channel{k}.w"] = channel.w
        arrays[f"channel{k}.df"] = channel.df
        arrays[f"channel{k}.dphi_q"] = channel.dphi_q

    frame = to_frame(result.reports)
    for name in frame.columns:
        column = frame[name]
        if column.dtype == pl.String:
            arrays[f"reports.{name}"] = np.array(column.to_list(), dtype=np.str_)
        else:
            arrays[f"reports.{name}"] = column.to_numpy()

    metadata = {
        "kind": RESPONSE_KIND,
        "deF": result.deF,
        "n_channels": len(result.channels),
        "total_h_applies": result.total_h_applies,
        "history": list(result.history),
    } | result.metadata | (extra_metadata or {})
    write_arrays(path, arrays, metadata)
    logger.info(f"Saved response ({len(result.reports)} solves) to {path}")


def load_response(path: Path) -> StoredResponse:
    arrays, metadata = read_arrays(path, RESPONSE_KIND)
    n_channels = metadata["n_channels"]
    frame = pl.DataFrame(
        {name: arrays[f"reports.{name}"] for name in SCHEMA.names()}, schema=SCHEMA
    )
    return StoredResponse(
        drho=arrays["drho"],
        deF=metadata["deF"],
        w=[arrays[f"channel{k}.w"] for k in range(n_channels)],
        df=[arrays[f"channel{k}.df"] for k in range(n_channels)],
        dphi_q=[arrays[f"channel{k}.dphi_q"] for k in range(n_channels)],
        reports=from_frame(frame),
        metadata=metadata,
    )
