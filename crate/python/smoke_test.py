"""Smoke test for the rfr Python extension."""

import math
import os
import tempfile

import rfr


def main():
    # partial convolution with an all-ones 3x3 kernel over a 5x5 map with one hole
    x = rfr.Tensor([1, 1, 5, 5], [1.0] * 25)
    mask_values = [1.0] * 25
    mask_values[12] = 0.0
    mask = rfr.Mask(rfr.Tensor([1, 1, 5, 5], mask_values))
    weight = rfr.Tensor.full([1, 1, 3, 3], 1.0)
    bias = rfr.Tensor.zeros([1, 1, 1, 1])
    y, updated = rfr.partial_conv(x, mask, weight, bias, stride=1, padding=1, double=True)
    assert y.shape == [1, 1, 5, 5]
    # the renormalized sum of ones is 9 wherever any input is valid
    assert abs(y.at(0, 0, 2, 2) - 9.0) < 1e-12, y.at(0, 0, 2, 2)
    assert updated.valid_count() == 25
    assert mask.update(3, 1, 1).valid_count() == 25

    plain = rfr.conv2d(x, weight, None, 1, 1)
    assert plain.at(0, 0, 0, 0) == 4.0

    # metrics
    a = rfr.Tensor([1, 3, 16, 16], [((i * 37) % 101) / 100.0 for i in range(768)])
    assert abs(rfr.ssim(a, a) - 1.0) < 1e-12
    assert math.isinf(rfr.psnr(a, a))
    assert rfr.mean_l1(a, a) == 0.0

    # parameter counts of the full-size network
    full = rfr.Net(seed=0)
    assert full.param_count() == 24822468, full.param_count()
    assert rfr.Net(seed=0, attention=False).param_count() == 24297667
    shapes = dict(full.trace_shapes(256, 256))
    assert shapes["rfr.merge"] == [1, 64, 128, 128], shapes["rfr.merge"]
    assert shapes["output"] == [1, 3, 256, 256]

    # micro network inpainting
    net = rfr.Net(seed=3, resolution=32, iter_num=2, channel_scale=8)
    image = rfr.Tensor([1, 3, 32, 32], [((i * 7) % 251) / 255.0 for i in range(3 * 32 * 32)])
    hole = rfr.Mask.centered_hole(32, 32, 12)
    pred, comp = net.inpaint(image, hole)
    assert pred.shape == [1, 3, 32, 32]
    assert all(math.isfinite(v) for v in pred.tolist())
    again, _ = net.inpaint(image, hole)
    assert pred.max_abs_diff(again) == 0.0
    _, same = net.inpaint(image, rfr.Mask.full(1, 32, 32), double=True)
    assert same.max_abs_diff(image) == 0.0

    # weight files round trip
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "micro.rfrw")
        net.save(path)
        other = rfr.Net(seed=4, resolution=32, iter_num=2, channel_scale=8)
        assert other.to_bytes() != net.to_bytes()
        other.load(path)
        assert other.to_bytes() == net.to_bytes()
        try:
            rfr.Net(seed=0, resolution=32, iter_num=2, channel_scale=4).load(path)
        except OSError:
            pass
        else:
            raise AssertionError("loading into a different width must fail")

    # configuration text
    text = rfr.parse_config("resolution = 32\nchannel_scale = 8\niter_num = 2\n")
    assert "channel_scale = 8" in text
    assert rfr.Net.from_config(text).param_count() == net.param_count()
    try:
        rfr.parse_config("colour = blue\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown keys must be rejected")

    print("smoke test passed")


if __name__ == "__main__":
    main()
