import struct

import numpy as np
import pytest

from hsinet.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from hsinet.data import SynthConfig, normalize_bands, synth_generate, with_split
from hsinet.errors import CheckpointError
from hsinet.network import CrossDomainSpec, NetworkSpec, build_backbone, build_cross_domain
from hsinet.trainer import TrainSchedule, train_single


def small_net(seed=0):
    spec = NetworkSpec(bands=4, classes=3, filters=4)
    return build_backbone(spec, np.random.default_rng(seed))


def small_cdn(seed=0):
    spec = CrossDomainSpec([
        NetworkSpec(bands=4, classes=3, filters=4),
        NetworkSpec(bands=6, classes=5, filters=4),
    ])
    return build_cross_domain(spec, np.random.default_rng(seed))


class TestRoundTrip:
    def test_single_network_bit_exact(self, tmp_path):
        net = small_net()
        rng = np.random.default_rng(7)
        rng.random(13)  # advance so the state is non-trivial
        save_checkpoint(net, tmp_path / "a.ckpt", rng=rng, iteration=42)
        ckpt = load_checkpoint(tmp_path / "a.ckpt")
        assert ckpt.kind == "single"
        assert ckpt.iteration == 42
        for (name, arr), (name2, arr2) in zip(net.state(), ckpt.network.state()):
            assert name == name2
            assert arr.tobytes() == arr2.tobytes()
        # restored rng continues the original stream
        assert ckpt.rng.random() == rng.random()

    def test_save_load_save_byte_identical(self, tmp_path):
        net = small_net()
        save_checkpoint(net, tmp_path / "a.ckpt", iteration=3)
        ckpt = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(ckpt.network, tmp_path / "b.ckpt", iteration=3)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_cross_domain_round_trip_preserves_aliasing(self, tmp_path):
        cdn = small_cdn()
        save_checkpoint(cdn, tmp_path / "c.ckpt")
        loaded = load_checkpoint(tmp_path / "c.ckpt").network
        assert loaded.shared_bytes(0) == cdn.shared_bytes(0)
        w0 = loaded.branches[0].modules[0].conv1.conv.w
        w1 = loaded.branches[1].modules[0].conv1.conv.w
        assert w0 is w1

    def test_spec_echo_restored(self, tmp_path):
        net = small_net()
        save_checkpoint(net, tmp_path / "a.ckpt")
        assert load_checkpoint(tmp_path / "a.ckpt").network.spec == net.spec


class TestCorruption:
    def test_truncated_file_rejected(self, tmp_path):
        net = small_net()
        save_checkpoint(net, tmp_path / "a.ckpt")
        data = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(data[:len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")

    def test_flipped_byte_fails_crc(self, tmp_path):
        net = small_net()
        save_checkpoint(net, tmp_path / "a.ckpt")
        data = bytearray((tmp_path / "a.ckpt").read_bytes())
        data[len(data) // 2] ^= 0xFF
        (tmp_path / "c.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="CRC"):
            load_checkpoint(tmp_path / "c.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b.ckpt").write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(tmp_path / "b.ckpt")

    def test_unknown_version(self, tmp_path):
        net = small_net()
        save_checkpoint(net, tmp_path / "a.ckpt")
        data = bytearray((tmp_path / "a.ckpt").read_bytes())
        data[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 9)
        # refresh the CRC so only the version is wrong
        import zlib
        data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])) & 0xFFFFFFFF)
        (tmp_path / "v.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="version 9"):
            load_checkpoint(tmp_path / "v.ckpt")


class TestResume:
    def test_resumed_training_matches_uninterrupted(self, tmp_path):
        ds = synth_generate(SynthConfig(classes=3, bands=4, height=12, width=12,
                                        noise_std=0.2, seed=1))
        ds = normalize_bands(with_split(ds, 10, np.random.default_rng(5)))
        spec = NetworkSpec(bands=4, classes=3, filters=4, dropout_rate=0.5)
        schedule = TrainSchedule(step_size=80, max_iter=200, batch=8)

        # uninterrupted: 200 iterations straight through
        net_a = build_backbone(spec, np.random.default_rng(3))
        rng_a = np.random.default_rng(100)
        train_single(net_a, ds, schedule, rng_a, eval_every=1000)

        # interrupted: 100 iterations, checkpoint, reload, 100 more
        net_b = build_backbone(spec, np.random.default_rng(3))
        rng_b = np.random.default_rng(100)
        half = TrainSchedule(step_size=80, max_iter=100, batch=8)
        train_single(net_b, ds, half, rng_b, eval_every=1000)
        save_checkpoint(net_b, tmp_path / "mid.ckpt", rng=rng_b, iteration=100)
        ckpt = load_checkpoint(tmp_path / "mid.ckpt")
        train_single(ckpt.network, ds, schedule, ckpt.rng,
                     start_iteration=ckpt.iteration, eval_every=1000)

        for (name, a), (_, b) in zip(net_a.state(), ckpt.network.state()):
            assert a.tobytes() == b.tobytes(), f"state diverged at {name}"
