"""ImagePool のテスト。"""
import torch

from VehicleAdaptation.image_pool import ImagePool


def test_zero_size_passes_through() -> None:
    images = torch.randn(4, 3, 2, 2)
    assert torch.equal(ImagePool(0).query(images), images)


def test_fills_before_replaying() -> None:
    pool = ImagePool(5, seed=0)
    first = torch.randn(5, 3, 2, 2)
    assert torch.equal(pool.query(first), first)
    assert len(pool) == 5


def test_returns_pool_or_input_images() -> None:
    """満杯後は入力そのものか、過去に入れた画像のどちらかが返る。"""
    pool = ImagePool(4, seed=1)
    seen = [img.clone() for img in torch.randn(4, 3, 2, 2)]
    pool.query(torch.stack(seen))
    for _ in range(10):
        batch = torch.randn(3, 3, 2, 2)
        out = pool.query(batch)
        assert out.shape == batch.shape
        for img in out:
            assert any(torch.equal(img, s) for s in seen + list(batch))
        seen.extend(batch)
        assert len(pool) == 4


def test_same_seed_same_replay() -> None:
    torch.manual_seed(0)
    batches = [torch.randn(3, 3, 2, 2) for _ in range(6)]
    a, b = ImagePool(2, seed=7), ImagePool(2, seed=7)
    for batch in batches:
        assert torch.equal(a.query(batch), b.query(batch))


def test_output_is_detached() -> None:
    images = torch.randn(2, 3, 2, 2, requires_grad=True)
    assert not ImagePool(2).query(images * 2).requires_grad
