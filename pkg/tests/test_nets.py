"""
Tests for Networks
Shape contracts, determinism, differentiability, domain-specific normalization and checkpoints
"""
import numpy as np
import pytest
import torch

from vesseladapt.exceptions import CorruptCheckpoint, ResolutionMismatch
from vesseladapt.nets import build_models, load_checkpoint, parameter_checksum, restore_models, save_checkpoint
from vesseladapt.nets.layers import DomainBatchNorm2d
from vesseladapt.schemas import NUM_CLASSES, AblationFlags
from tests.conftest import tiny_net_config


@pytest.fixture
def bundle(net_config, flags):
    return build_models(net_config, flags, seed=0)


def _images(net, batch=2, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(batch, net.channels, net.image_size, net.image_size, generator=generator) * 2 - 1


class TestGenerator:
    """Test mapping and synthesis"""

    def test_map_latent_shape(self, bundle, net_config):
        """Test that one z broadcasts to L equal styles of size Dw"""
        w = bundle.map_latent(torch.randn(3, net_config.z_dim))
        assert w.shape == (3, net_config.num_ws, net_config.w_dim)
        assert torch.equal(w[:, 0], w[:, -1])

    def test_map_latent_deterministic(self, bundle, net_config):
        """Test that identical codes give identical styles"""
        z = torch.randn(1, net_config.z_dim)
        assert torch.equal(bundle.map_latent(z), bundle.map_latent(z.clone()))

    def test_mapping_spread(self, bundle, net_config):
        """Test that the mapping output neither collapses nor explodes at initialization"""
        with torch.no_grad():
            w = bundle.G.style(torch.randn(1000, net_config.z_dim))
        std = w.std(dim=0)
        assert torch.all(std > 0.1) and torch.all(std < 10)

    def test_generate_shapes(self, bundle, net_config):
        """Test the image shape and the exposed feature stack"""
        w = bundle.map_latent(torch.randn(2, net_config.z_dim))
        image, features = bundle.generate(w)
        assert image.shape == (2, net_config.channels, net_config.image_size, net_config.image_size)
        assert sorted(features) == [4, 8, 16]
        assert all(f.shape[-1] == res for res, f in features.items())

    def test_generate_deterministic_with_fixed_noise(self, bundle, net_config):
        """Test that fixed noise inputs make synthesis deterministic"""
        w = bundle.map_latent(torch.randn(2, net_config.z_dim))
        a, _ = bundle.generate(w, randomize_noise=False)
        b, _ = bundle.generate(w, randomize_noise=False)
        assert torch.equal(a, b)

    def test_wrong_latent_count(self, bundle, net_config):
        """Test that codes with the wrong number of styles are refused"""
        with pytest.raises(ResolutionMismatch):
            bundle.generate(torch.zeros(1, net_config.num_ws + 1, net_config.w_dim))

    def test_jacobian_vector_product(self, net_config, flags):
        """Test ∂G/∂w · u against central finite differences in float64"""
        bundle = build_models(net_config, flags, seed=1).double()
        w = bundle.map_latent(torch.randn(1, net_config.z_dim, dtype=torch.float64)).detach()
        u = torch.randn_like(w)

        def gen(codes):
            return bundle.generate(codes, randomize_noise=False)[0]

        _, jvp = torch.autograd.functional.jvp(gen, (w,), (u,))
        eps = 1e-6
        with torch.no_grad():
            fd = (gen(w + eps * u) - gen(w - eps * u)) / (2 * eps)
        assert torch.linalg.norm(jvp - fd) <= 1e-3 * torch.linalg.norm(fd)


class TestLabelBranch:
    """Test the label-synthesis branch"""

    def test_logits(self, bundle, net_config):
        """Test 3-class logits on the image grid whose softmax sums to one"""
        w = bundle.map_latent(torch.randn(2, net_config.z_dim))
        _, features = bundle.generate(w)
        logits = bundle.label_branch(features)
        assert logits.shape == (2, NUM_CLASSES, net_config.image_size, net_config.image_size)
        assert torch.allclose(torch.softmax(logits, 1).sum(1), torch.ones(2, 16, 16), atol=1e-6)

    def test_missing_resolution(self, bundle, net_config):
        """Test that an incomplete feature stack is refused"""
        _, features = bundle.generate(bundle.map_latent(torch.randn(1, net_config.z_dim)))
        del features[8]
        with pytest.raises(ResolutionMismatch):
            bundle.label_branch(features)

    def test_frozen_generator_keeps_image(self, bundle, net_config):
        """Test that a label-branch step changes logits but not the generated image"""
        bundle.freeze_generator()
        w = bundle.map_latent(torch.randn(2, net_config.z_dim)).detach()
        image_before, features = bundle.generate(w)
        logits_before = bundle.label_branch(features).detach()

        opt = torch.optim.SGD(bundle.G_lsb.parameters(), lr=0.5)
        bundle.label_branch(features).square().mean().backward()
        opt.step()

        image_after, features = bundle.generate(w)
        assert torch.equal(image_before, image_after)
        assert not torch.allclose(bundle.label_branch(features), logits_before)


class TestEncoder:
    """Test the domain-flagged encoder"""

    def test_shapes(self, bundle, net_config):
        """Test W+ codes and residuals at the skip resolutions"""
        w, residuals = bundle.encode(_images(net_config), 1)
        assert w.shape == (2, net_config.num_ws, net_config.w_dim)
        assert sorted(residuals) == [8, 16]

    def test_flag_changes_code(self, bundle, net_config):
        """Test that the same image encodes differently per domain"""
        bundle.eval()
        x = _images(net_config)
        w0, _ = bundle.encode(x, 0)
        w1, _ = bundle.encode(x, 1)
        assert torch.linalg.norm(w0 - w1) > 0

    def test_residuals_off(self, net_config):
        """Test that disabling residuals drops the skip connections"""
        bundle = build_models(net_config, AblationFlags(residuals=False), seed=0)
        _, residuals = bundle.encode(_images(net_config), 0)
        assert residuals is None

    def test_translate_shapes(self, bundle, net_config):
        """Test that translation returns an image shaped like its input plus logits"""
        x = _images(net_config)
        image, logits = bundle.translate(x, 1)
        assert image.shape == x.shape
        assert logits.shape == (2, NUM_CLASSES, net_config.image_size, net_config.image_size)

    def test_dsbn_separation(self):
        """Test that source-only batches leave the target statistics untouched"""
        norm = DomainBatchNorm2d(4, num_domains=2).train()
        norm(torch.randn(6, 4, 5, 5) + 3.0, 0)
        assert not torch.allclose(norm.bns[0].running_mean, torch.zeros(4))
        assert torch.equal(norm.bns[1].running_mean, torch.zeros(4))
        assert torch.equal(norm.bns[1].running_var, torch.ones(4))

    def test_dsbn_mixed_batch(self):
        """Test that a mixed batch normalizes each domain with its own statistics"""
        norm = DomainBatchNorm2d(2, num_domains=2).train()
        x = torch.cat([torch.randn(3, 2, 4, 4), torch.randn(3, 2, 4, 4) + 10.0])
        out = norm(x, torch.tensor([0, 0, 0, 1, 1, 1]))
        assert out[:3].mean().abs() < 1e-4
        assert out[3:].mean().abs() < 1e-4

    def test_shared_norm_without_dsbn(self, net_config):
        """Test that dsbn off keeps one set of statistics"""
        bundle = build_models(net_config, AblationFlags(dsbn=False), seed=0)
        assert len(bundle.E.stem.norm1.bns) == 1


class TestDiscriminator:
    """Test the critic"""

    def test_scores(self, bundle, net_config):
        """Test one finite logit per image and a finite input gradient"""
        x = _images(net_config, batch=3).requires_grad_(True)
        scores = bundle.discriminate(x)
        assert scores.shape == (3,)
        (grad,) = torch.autograd.grad(scores.sum(), x)
        assert torch.isfinite(grad).all()

    def test_sane_initialization(self, bundle, net_config):
        """Test that real and generated scores start within a small range"""
        with torch.no_grad():
            fake, _ = bundle.generate(bundle.map_latent(torch.randn(4, net_config.z_dim)))
            gap = (bundle.discriminate(_images(net_config, 4)).mean() - bundle.discriminate(fake).mean()).abs()
        assert gap < 10


class TestCheckpoints:
    """Test checkpoint archives"""

    def test_round_trip(self, tmp_path, bundle, net_config, flags):
        """Test that restored weights reproduce every component"""
        state = {"config": {}, "config_hash": "x", "phase": "phase1", "iteration": 3}
        save_checkpoint(tmp_path / "last.pt", bundle, state)

        other = restore_models(build_models(net_config, flags, seed=9), load_checkpoint(tmp_path / "last.pt"))
        for name in ("G", "G_lsb", "E", "D"):
            assert parameter_checksum(getattr(other, name), include_buffers=True) == \
                parameter_checksum(getattr(bundle, name), include_buffers=True)

    def test_missing_fields(self, tmp_path):
        """Test that an archive without the run state is corrupt"""
        torch.save({"format": 1}, tmp_path / "bad.pt")
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "bad.pt")

    def test_unreadable(self, tmp_path):
        """Test that garbage bytes are reported as a corrupt checkpoint"""
        (tmp_path / "junk.pt").write_bytes(np.arange(10, dtype=np.uint8).tobytes())
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(tmp_path / "junk.pt")

    def test_wrong_architecture(self, tmp_path, bundle, flags):
        """Test that weights of another network size do not load"""
        save_checkpoint(tmp_path / "last.pt", bundle, {"config": {}, "config_hash": "x", "phase": "phase1",
                                                        "iteration": 0})
        wider = tiny_net_config().model_copy(update={"base_channels": 16})
        with pytest.raises(CorruptCheckpoint):
            restore_models(build_models(wider, flags, seed=0), load_checkpoint(tmp_path / "last.pt"))
