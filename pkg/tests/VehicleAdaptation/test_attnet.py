"""ATTNet のテスト。"""
import math
from pathlib import Path
from typing import Callable

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from VehicleAdaptation.attnet import (
    AttNet,
    attnet_loss_terms,
    attnet_total_loss,
    export_embeddings,
    extract_embeddings,
    identification_loss,
    load_embeddings,
    verification_logits,
    verification_loss,
)
from VehicleAdaptation.dataset_index import DatasetRecord
from VehicleAdaptation.pair_sampler import PairBatch

SIZE = 16


def _tiny(num_classes: int = 5, seed: int = 0, **kwargs) -> AttNet:
    torch.manual_seed(seed)
    return AttNet(num_classes, backbone="tiny", hidden_dims=(16, 8), input_size=SIZE, tiny_channels=8, **kwargs)


def _images(batch: int, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, SIZE, SIZE, generator=g) * 2 - 1


def _pair(batch: int = 4, num_classes: int = 5, seed: int = 0) -> PairBatch:
    g = torch.Generator().manual_seed(seed)
    ids_a = torch.randint(0, num_classes, (batch,), generator=g)
    ids_b = ids_a.clone()
    ids_b[batch // 2 :] = (ids_b[batch // 2 :] + 1) % num_classes
    return PairBatch(
        images_a=_images(batch, seed),
        images_b=_images(batch, seed + 100),
        ids_a=ids_a,
        ids_b=ids_b,
        same_flags=(ids_a == ids_b).long(),
    )


@torch.no_grad()
def test_resnet50_embedding_layout() -> None:
    """ResNet-50 で f_a は 512 + 2048 = 2560 次元、注意をゼロにするとマスクは一様 1/2048。"""
    torch.manual_seed(0)
    model = AttNet(10).eval()
    nn.init.zeros_(model.attention_conv.weight)
    nn.init.zeros_(model.attention_conv.bias)
    emb = model(torch.zeros(1, 3, 224, 224))
    assert emb.f_a.shape == (1, 2560)
    assert torch.allclose(emb.mask_M, torch.full_like(emb.mask_M, 1 / 2048))
    assert torch.allclose(emb.f_m, emb.f_g / 2048)
    assert torch.equal(emb.f_a, torch.cat([emb.f_d, emb.f_g], dim=1))


@torch.no_grad()
def test_mask_is_softmax() -> None:
    model = _tiny().eval()
    emb = model(_images(3))
    assert torch.all(emb.mask_M > 0)
    assert torch.allclose(emb.mask_M.sum(dim=1), torch.ones(3), atol=1e-6)
    assert torch.allclose(emb.f_sum, emb.f_g + emb.f_m)


@torch.no_grad()
def test_forward_matches_layer_by_layer_oracle() -> None:
    """f_a を numpy で層ごとに再計算して一致することを確認。"""
    model = _tiny(seed=4).eval()
    img = _images(1, seed=4)
    emb = model(img)

    f_g = model.backbone(img).mean(dim=(2, 3))[0].numpy().astype(np.float64)
    c = f_g.shape[0]
    w_att = model.attention_conv.weight.reshape(c, c).numpy()
    scores = w_att @ f_g + model.attention_conv.bias.numpy()
    mask = np.exp(scores - scores.max())
    mask /= mask.sum()
    f_sum = f_g + f_g * mask
    h = np.maximum(model.fc1.weight.numpy() @ f_sum + model.fc1.bias.numpy(), 0.0)
    f_d = model.fc2.weight.numpy() @ h + model.fc2.bias.numpy()
    f_a = np.concatenate([f_d, f_g])
    assert np.allclose(emb.f_a[0].numpy(), f_a, atol=1e-5)


@torch.no_grad()
def test_baseline_without_attention() -> None:
    """use_attention=False では f_sum = f_g（ショートカットのみ）。"""
    model = _tiny(use_attention=False).eval()
    emb = model(_images(2))
    assert emb.mask_M is None
    assert torch.equal(emb.f_sum, emb.f_g)


@torch.no_grad()
def test_attention_path_changes_features() -> None:
    model = _tiny().eval()
    img = _images(2)
    with_attention = model(img).f_d
    model.use_attention = False
    assert float((model(img).f_d - with_attention).abs().max()) > 0


def test_input_size_checked() -> None:
    with pytest.raises(ValueError):
        _tiny()(torch.zeros(1, 3, SIZE + 4, SIZE))


def test_identification_loss_examples() -> None:
    """正解に飽和したロジットで損失≈0、一様ロジットで ln C。"""
    logits = torch.zeros(2, 6)
    logits[0, 3] = 1000
    logits[1, 1] = 1000
    assert float(identification_loss(logits, torch.tensor([3, 1]))) < 1e-3
    assert float(identification_loss(torch.zeros(3, 6), torch.tensor([0, 2, 5]))) == pytest.approx(math.log(6))
    with pytest.raises(ValueError):
        identification_loss(torch.zeros(1, 6), torch.tensor([6]))


def test_identification_loss_matches_oracle() -> None:
    rng = np.random.default_rng(0)
    for _ in range(100):
        logits = rng.normal(size=(4, 7)) * 3
        labels = rng.integers(0, 7, size=4)
        expected = np.mean(
            [-(row[y] - row.max() - math.log(np.exp(row - row.max()).sum())) for row, y in zip(logits, labels)]
        )
        got = float(identification_loss(torch.from_numpy(logits), torch.from_numpy(labels)))
        assert got == pytest.approx(expected, rel=1e-6)


@torch.no_grad()
def test_verification_examples() -> None:
    """同じ埋め込み同士ではロジットはバイアスだけになる。"""
    model = _tiny().eval()
    emb = model(_images(2))
    logits = verification_logits(model, emb, emb)
    assert torch.allclose(logits, model.verif_classifier.bias.expand(2, 2))

    nn.init.zeros_(model.verif_classifier.weight)
    model.verif_classifier.bias.copy_(torch.tensor([-1000.0, 1000.0]))
    assert float(verification_loss(model, emb, emb, torch.ones(2, dtype=torch.long))) < 1e-6


@torch.no_grad()
def test_verification_symmetric_and_matches_oracle() -> None:
    model = _tiny(seed=2).eval()
    e1 = model(_images(4, seed=1))
    e2 = model(_images(4, seed=2))
    assert torch.allclose(verification_logits(model, e1, e2), verification_logits(model, e2, e1))

    same = torch.tensor([1, 0, 1, 0])
    logits = verification_logits(model, e1, e2).double().numpy()
    expected = np.mean([-(row[s] - np.log(np.exp(row).sum())) for row, s in zip(logits, same.numpy())])
    assert float(verification_loss(model, e1, e2, same)) == pytest.approx(expected, rel=1e-5)


@torch.no_grad()
def test_total_loss_decomposes() -> None:
    """合計損失 = 識別損失 + 検証損失。両ブランチは同じ重みを通る。"""
    model = _tiny().eval()
    pair = _pair()
    id_loss, verif_loss = attnet_loss_terms(pair, model)
    assert float(attnet_total_loss(pair, model)) == pytest.approx(float(id_loss + verif_loss), rel=1e-6)

    e1, e2 = model(pair.images_a), model(pair.images_b)
    labels = torch.cat([pair.ids_a, pair.ids_b])
    separate_id = F.cross_entropy(model.id_classifier(torch.cat([e1.f_a, e2.f_a])), labels)
    separate_verif = verification_loss(model, e1, e2, pair.same_flags)
    assert float(id_loss) == pytest.approx(float(separate_id), rel=1e-5)
    assert float(verif_loss) == pytest.approx(float(separate_verif), rel=1e-5)


def _central_difference(objective: Callable[[], torch.Tensor], flat: torch.Tensor, k: int, eps: float) -> float:
    original = float(flat[k])
    with torch.no_grad():
        flat[k] = original + eps
        plus = float(objective())
        flat[k] = original - eps
        minus = float(objective())
        flat[k] = original
    return (plus - minus) / (2 * eps)


def test_gradient_matches_finite_differences() -> None:
    """tiny バックボーンで勾配を中心差分と比較する（20パラメータ、評価モード）。"""
    model = _tiny(seed=1).double().eval()
    pair = _pair(seed=3)
    pair = PairBatch(pair.images_a.double(), pair.images_b.double(), pair.ids_a, pair.ids_b, pair.same_flags)

    def objective() -> torch.Tensor:
        return attnet_total_loss(pair, model)

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    objective().backward()

    rng = np.random.default_rng(0)
    for _ in range(20):
        p = params[int(rng.integers(len(params)))]
        flat = p.data.view(-1)
        k = int(rng.integers(flat.numel()))
        analytic = float(p.grad.view(-1)[k])

        fine = _central_difference(objective, flat, k, 1e-6)
        assert abs(analytic - fine) <= 1e-3 * max(abs(analytic), abs(fine)) + 1e-7

        # ε=1e-3 の打ち切り誤差 O(ε²) は半分の刻みとの差から見積もる
        coarse = _central_difference(objective, flat, k, 1e-3)
        half = _central_difference(objective, flat, k, 5e-4)
        truncation = 2 * abs(coarse - half)
        assert abs(analytic - coarse) <= 1e-3 * max(abs(analytic), abs(coarse)) + truncation + 1e-7


def test_extract_and_export_embeddings(tmp_path: Path) -> None:
    records = []
    for i in range(5):
        path = tmp_path / f"{i}.png"
        Image.new("RGB", (20, 20), (i * 40, 10, 200 - i * 30)).save(path)
        records.append(DatasetRecord(str(path), i % 2, camera_id=i))
    model = _tiny()
    matrix = extract_embeddings(model, records, batch_size=2)
    assert matrix.shape == (5, model.embedding_dim)
    assert matrix.dtype == np.float32
    assert model.training

    out = export_embeddings(matrix, records, tmp_path / "emb.bin")
    assert out.stat().st_size == 5 * model.embedding_dim * 4
    loaded, loaded_records = load_embeddings(out)
    assert np.array_equal(loaded, matrix)
    assert loaded_records == records
    with pytest.raises(ValueError):
        export_embeddings(matrix, records[:3], tmp_path / "bad.bin")
