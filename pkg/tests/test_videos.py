import numpy as np
import pytest

from stochgcn.data import SyntheticSpec, generate_synthetic
from stochgcn.errors import InvalidConfigError, InvalidInputError
from stochgcn.optical_flow import FlowConfig
from stochgcn.videos import flow_signal, frame_signal, prepare_videos, source_images


def test_frame_signal_puts_intensity_in_channel_zero():
    frames = np.arange(8.0).reshape(2, 2, 2)
    sig = frame_signal(frames, 2)
    assert sig.shape == (2, 4, 2)
    np.testing.assert_array_equal(sig[:, :, 0], frames.reshape(2, 4))
    np.testing.assert_array_equal(sig[:, :, 1], 0.0)


def test_flow_signal_layout():
    img = np.stack([np.full((2, 3), 1.0), np.full((2, 3), -1.0)])[None]
    sig = flow_signal(img, 2)
    assert sig.shape == (1, 6, 2)
    np.testing.assert_array_equal(sig[0, :, 0], 1.0)
    np.testing.assert_array_equal(sig[0, :, 1], -1.0)
    with pytest.raises(InvalidConfigError):
        flow_signal(img, 1)


@pytest.fixture(scope="module")
def videos():
    spec = SyntheticSpec(n_classes=2, samples_per_class=3, resolution=(16, 16), frames=6,
                         blob_sigma=1.5, test_fraction=0.0)
    data = generate_synthetic(spec)[0]
    return data, prepare_videos(data, FlowConfig(iterations=20, m_s=4, m_t=3))


def test_prepared_shapes_and_labels(videos):
    data, vs = videos
    assert vs.spatial.shape == (6, 4, 256, 2)
    assert vs.temporal.shape == (6, 3, 256, 2)
    np.testing.assert_array_equal(vs.labels, data.labels)
    assert vs.ids == data.ids


def test_rows_by_branch(videos):
    _, vs = videos
    rows, n_sp = vs.rows("both")
    assert rows.shape[1] == 7 and n_sp == 4
    np.testing.assert_array_equal(rows[:, 4:], vs.temporal)
    assert vs.rows("spatial")[0].shape[1] == 4
    rows, n_sp = vs.rows("temporal")
    assert rows.shape[1] == 3 and n_sp == 0
    with pytest.raises(InvalidConfigError):
        vs.rows("neither")


def test_subset(videos):
    _, vs = videos
    sub = vs.subset([2, 0])
    assert sub.ids == [vs.ids[2], vs.ids[0]]
    np.testing.assert_array_equal(sub.spatial[1], vs.spatial[0])


def test_source_images_take_the_last_frame(videos):
    data, _ = videos
    x, y = source_images(data)
    np.testing.assert_array_equal(x[0, :, 0], data.samples[0].frames[-1].reshape(-1))
    np.testing.assert_array_equal(y, data.labels)


def test_too_few_frames_rejected(videos):
    data, _ = videos
    with pytest.raises(InvalidInputError):
        prepare_videos(data, FlowConfig(iterations=5, m_s=7, m_t=3))
