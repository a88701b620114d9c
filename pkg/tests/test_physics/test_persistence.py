import numpy as np
import pytest

from dfpt.persistence import (
    FormatError,
    load_groundstate,
    load_response,
    read_arrays,
    save_groundstate,
    save_response,
    write_arrays,
)
from dfpt.response import apply_chi0


def test_groundstate_round_trip(tmp_path, two_channel):
    gs = two_channel.prepare(seed=17)
    path = tmp_path / "gs.npz"
    save_groundstate(gs, path)
    loaded = load_groundstate(path)

    assert loaded.fermi_level == gs.fermi_level
    assert loaded.n_el == gs.n_el
    assert loaded.seed == 17
    assert loaded.smearing == gs.smearing
    assert loaded.band_policy == gs.band_policy
    for original, restored in zip(gs.channels, loaded.channels):
        assert np.array_equal(restored.spectrum.vectors, original.spectrum.vectors)
        assert np.array_equal(
            restored.spectrum.eigenvalues, original.spectrum.eigenvalues
        )
        assert restored.spectrum.n_occ == original.spectrum.n_occ
        assert restored.n_conv == original.n_conv
        assert restored.channel.weight == original.channel.weight
        assert restored.channel.potential == original.channel.potential
    assert np.array_equal(loaded.rho(), gs.rho())


def test_saving_is_deterministic(tmp_path, metal_gs):
    first, second = tmp_path / "a.npz", tmp_path / "b.npz"
    save_groundstate(metal_gs, first)
    save_groundstate(metal_gs, second)
    assert first.read_bytes() == second.read_bytes()


def test_response_round_trip(tmp_path, metal_gs, dV):
    result = apply_chi0(metal_gs, dV)
    path = tmp_path / "response.npz"
    save_response(result, path, {"seed": 3})
    stored = load_response(path)

    assert np.array_equal(stored.drho, result.drho)
    assert stored.deF == result.deF
    assert stored.reports == result.reports
    assert np.array_equal(stored.w[0], result.channels[0].w)
    assert np.array_equal(stored.dphi_q[0], result.channels[0].dphi_q)
    assert stored.metadata["seed"] == 3
    assert stored.metadata["method"] == "schur"

    again = tmp_path / "again.npz"
    save_response(result, again, {"seed": 3})
    assert again.read_bytes() == path.read_bytes()


def test_wrong_kind_is_rejected(tmp_path, metal_gs):
    path = tmp_path / "gs.npz"
    save_groundstate(metal_gs, path)
    with pytest.raises(FormatError):
        load_response(path)


def test_foreign_archive_is_rejected(tmp_path):
    path = tmp_path / "plain.npz"
    np.savez(path, x=np.arange(3))
    with pytest.raises(FormatError):
        read_arrays(path, "dfpt-groundstate")
    with pytest.raises(FileNotFoundError):
        read_arrays(tmp_path / "missing.npz", "dfpt-groundstate")


def test_version_mismatch(tmp_path, monkeypatch):
    path = tmp_path / "future.npz"
    monkeypatch.setattr("dfpt.persistence.FORMAT_VERSION", 99)
    write_arrays(path, {}, {"kind": "dfpt-groundstate"})
    monkeypatch.undo()
    with pytest.raises(FormatError, match="version 99"):
        read_arrays(path, "dfpt-groundstate")


def test_scalar_entries_stay_scalar(tmp_path):
    path = tmp_path / "scalars.npz"
    write_arrays(path, {"x": np.arange(3.0)}, {"kind": "dfpt-groundstate", "n": 2})
    with np.load(path) as data:
        assert data["metadata"].shape == ()
        assert data["format_version"].shape == ()
    arrays, metadata = read_arrays(path, "dfpt-groundstate")
    assert metadata == {"kind": "dfpt-groundstate", "n": 2}
    assert np.array_equal(arrays["x"], np.arange(3.0))
