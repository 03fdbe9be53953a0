import io
import math

import numpy as np
import pytest

from navforge.depth_codec import (
    CameraIntrinsics,
    DepthCodecParams,
    DepthMap,
    PointCloud,
    decode_depth,
    decode_depth_map,
    depth_to_pointcloud,
    encode_depth,
    millimeter_to_meters,
    pointcloud_to_depth,
    read_depth_png,
    read_raw_codes,
    to_millimeter_map,
    write_depth_png,
    write_raw_codes,
)

DEFAULT = DepthCodecParams()


class TestCodecParams:
    def test_defaults(self):
        assert DEFAULT.d_max == 960.0 and DEFAULT.d_min == 1.0

    @pytest.mark.parametrize("d_max,d_min", [(960, 0), (960, -1), (1, 1), (0.5, 1)])
    def test_invalid_ranges(self, d_max, d_min):
        with pytest.raises(ValueError):
            DepthCodecParams(d_max=d_max, d_min=d_min)


class TestDecodeEncode:
    def test_code_zero_is_max_range(self):
        assert decode_depth(0.0) == 960.0

    def test_code_one_is_min_range(self):
        assert decode_depth(1.0) == 1.0

    def test_midpoint(self):
        assert decode_depth(0.5) == pytest.approx(math.sqrt(960), abs=1e-9)

    def test_boundaries_encode(self):
        assert encode_depth(960.0) == 0.0
        assert encode_depth(1.0) == 1.0

    def test_round_trip_coarse_grid(self):
        for v in np.linspace(0.0, 1.0, 11):
            assert encode_depth(decode_depth(float(v))) == pytest.approx(v, abs=1e-9)

    def test_strictly_decreasing(self):
        codes = np.linspace(0.0, 1.0, 1001)
        depths = decode_depth(codes)
        assert np.all(np.diff(depths) < 0.0)

    def test_custom_params(self):
        params = DepthCodecParams(d_max=100.0, d_min=0.5)
        assert decode_depth(0.0, params) == 100.0
        assert decode_depth(1.0, params) == 0.5
        assert encode_depth(decode_depth(0.37, params), params) == pytest.approx(0.37, abs=1e-12)

    def test_out_of_range_codes(self):
        for bad in (-0.01, 1.01, math.nan):
            with pytest.raises(ValueError):
                decode_depth(bad)

    def test_out_of_range_depths(self):
        for bad in (0.5, 961.0, math.inf):
            with pytest.raises(ValueError):
                encode_depth(bad)

    def test_map_decode(self):
        raw = DepthMap(np.array([[0.0, 1.0], [0.5, 0.25]]))
        meters = decode_depth_map(raw)
        assert meters.values[0, 0] == 960.0
        assert meters.values[0, 1] == 1.0


class TestMillimeterMap:
    def test_one_meter(self):
        mm = to_millimeter_map(DepthMap(np.array([[1.0]])))
        assert mm.dtype == np.uint16
        assert mm[0, 0] == 1000

    def test_clamp_beyond_16bit(self):
        assert to_millimeter_map(DepthMap(np.array([[70.0]])))[0, 0] == 65535

    def test_rounding_floor_of_valid_range(self):
        assert to_millimeter_map(DepthMap(np.array([[0.001]])))[0, 0] == 1

    def test_never_zero_at_half_millimeter(self):
        vals = np.array([[0.0005, 0.0006, 0.0004999]])
        mm = to_millimeter_map(DepthMap(vals))
        assert mm[0, 0] == 1 and mm[0, 1] == 1
        # strictly positive depths never collapse to the invalid sentinel
        assert mm[0, 2] >= 1

    def test_zero_stays_invalid(self):
        assert to_millimeter_map(DepthMap(np.array([[0.0]])))[0, 0] == 0

    def test_back_conversion(self):
        mm = np.array([[1000, 0, 65535]], dtype=np.uint16)
        back = millimeter_to_meters(mm)
        assert back.values[0, 0] == 1.0 and back.values[0, 1] == 0.0


class TestDepthMapType:
    def test_rejects_holes(self):
        with pytest.raises(ValueError):
            DepthMap(np.array([[1.0, math.nan]]))
        with pytest.raises(ValueError):
            DepthMap(np.array([[1.0, -0.1]]))
        with pytest.raises(ValueError):
            DepthMap(np.zeros((0, 4)))


class TestPointCloudProjection:
    def test_principal_point_ray(self):
        k = CameraIntrinsics(fx=100.0, fy=100.0, cx=2.0, cy=1.0, width=5, height=3)
        depth = np.zeros((3, 5))
        depth[1, 2] = 5.0
        cloud = depth_to_pointcloud(DepthMap(depth), k)
        assert len(cloud) == 1
        assert cloud.points[0] == pytest.approx([0.0, 0.0, 5.0])

    def test_pinhole_arithmetic(self):
        k = CameraIntrinsics(fx=1000.0, fy=1000.0, cx=960.0, cy=540.0, width=1920, height=1080)
        depth = np.zeros((1080, 1920))
        depth[540, 1060] = 10.0
        cloud = depth_to_pointcloud(DepthMap(depth), k)
        assert cloud.points[0] == pytest.approx([1.0, 0.0, 10.0])

    def test_single_pixel_map(self):
        k = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=1, height=1)
        cloud = depth_to_pointcloud(DepthMap(np.array([[4.0]])), k)
        assert len(cloud) == 1

    def test_dimension_mismatch(self):
        k = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=2, height=2)
        with pytest.raises(ValueError):
            depth_to_pointcloud(DepthMap(np.ones((3, 3))), k)

    def test_colors_follow_points(self):
        k = CameraIntrinsics(fx=10.0, fy=10.0, cx=1.0, cy=1.0, width=3, height=3)
        depth = np.array([[0.0, 1.0, 0.0], [2.0, 0.0, 3.0], [0.0, 0.0, 0.0]])
        rgb = np.arange(27, dtype=np.uint8).reshape(3, 3, 3)
        cloud = depth_to_pointcloud(DepthMap(depth), k, rgb=rgb)
        assert len(cloud) == 3
        assert cloud.colors is not None and len(cloud.colors) == 3

    def test_empty_cloud_projects_to_zero_map(self):
        k = CameraIntrinsics(fx=5.0, fy=5.0, cx=1.0, cy=1.0, width=4, height=4)
        depth, skipped = pointcloud_to_depth(PointCloud(np.zeros((0, 3))), k)
        assert skipped == 0
        assert np.all(depth.values == 0.0)

    def test_z_buffer_keeps_nearest(self):
        k = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=1, height=1)
        cloud = PointCloud(np.array([[0.0, 0.0, 7.0], [0.0, 0.0, 3.0]]))
        depth, skipped = pointcloud_to_depth(cloud, k)
        assert depth.values[0, 0] == 3.0
        assert skipped == 0

    def test_out_of_frame_points_counted(self):
        k = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=1, height=1)
        cloud = PointCloud(np.array([[50.0, 0.0, 1.0], [0.0, 0.0, 2.0]]))
        depth, skipped = pointcloud_to_depth(cloud, k)
        assert skipped == 1
        assert depth.values[0, 0] == 2.0

    def test_nonpositive_z_rejected_at_construction(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, 0.0, -1.0]]))

    def test_dense_round_trip_random(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            h, w = 16, 24
            fx, fy = rng.uniform(20, 200, 2)
            cx, cy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
            k = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h)
            depth = DepthMap(rng.uniform(1.0, 960.0, (h, w)))
            cloud = depth_to_pointcloud(depth, k)
            assert len(cloud) == h * w
            back, skipped = pointcloud_to_depth(cloud, k)
            assert skipped == 0
            assert np.array_equal(back.values, depth.values)


class TestSerialization:
    def test_png_round_trip(self):
        mm = np.array([[0, 1, 1000], [65535, 42, 7]], dtype=np.uint16)
        buf = io.BytesIO()
        write_depth_png(mm, buf)
        assert np.array_equal(read_depth_png(buf.getvalue()), mm)

    def test_png_rejects_wrong_dtype(self):
        with pytest.raises(ValueError):
            write_depth_png(np.zeros((2, 2), dtype=np.float32), io.BytesIO())

    def test_raw_codes_round_trip(self, tmp_path):
        codes = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
        path = str(tmp_path / "frame.gtad")
        write_raw_codes(codes, path)
        back = read_raw_codes(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, codes)

    def test_raw_codes_header(self):
        buf = io.BytesIO()
        write_raw_codes(np.zeros((2, 5), dtype=np.float32), buf)
        data = buf.getvalue()
        assert data[:4] == b"GTAD"
        assert len(data) == 16 + 4 * 10

    def test_raw_codes_bad_magic(self):
        buf = io.BytesIO()
        write_raw_codes(np.zeros((2, 2), dtype=np.float32), buf)
        corrupted = b"XXXX" + buf.getvalue()[4:]
        with pytest.raises(ValueError):
            read_raw_codes(corrupted)

    def test_raw_codes_truncated(self):
        buf = io.BytesIO()
        write_raw_codes(np.zeros((2, 2), dtype=np.float32), buf)
        with pytest.raises(ValueError):
            read_raw_codes(buf.getvalue()[:-3])

    def test_raw_codes_range_validated(self):
        with pytest.raises(ValueError):
            write_raw_codes(np.array([[1.5]], dtype=np.float32), io.BytesIO())
