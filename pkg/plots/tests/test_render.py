import csv
import json
import subprocess

import numpy as np
import pytest

from sounderplots import PlotJob, SchemaError, render
from sounderplots.cli import main


def read_csv_rows(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


class TestRenderKinds:
    def test_pdp_annotates_file_argmax(self, demo_outputs, tmp_path):
        out = tmp_path / "pdp.png"
        res = render(PlotJob("pdp", str(demo_outputs["pdp"]), str(out)))
        assert out.exists() and out.stat().st_size > 0
        _, data = read_csv_rows(demo_outputs["pdp"])
        k = int(np.argmax(data[:, 1]))
        assert res["annotations"]["peak_delay_ns"] == data[k, 0]
        assert res["annotations"]["peak_power_db"] == data[k, 1]

    def test_pas_annotates_peak_cell(self, demo_outputs, tmp_path):
        out = tmp_path / "pas.png"
        res = render(PlotJob("pas", str(demo_outputs["pas"]), str(out)))
        assert out.exists() and out.stat().st_size > 0
        _, data = read_csv_rows(demo_outputs["pas"])
        k = int(np.argmax(data[:, 2]))
        assert res["annotations"]["peak_az_deg"] == data[k, 0]
        assert res["annotations"]["peak_el_deg"] == data[k, 1]

    def test_track_scatter_and_threshold(self, demo_outputs, tmp_path):
        out = tmp_path / "aoa.png"
        res = render(PlotJob("aoa_track", str(demo_outputs["tracks"]), str(out)))
        assert out.exists() and out.stat().st_size > 0
        _, data = read_csv_rows(demo_outputs["tracks"])
        k = int(np.argmax(data[:, 5]))
        assert res["annotations"]["strongest_az_deg"] == data[k, 2]
        n_keep = int(np.sum(data[:, 5] >= data[:, 5].max() - 30.0))
        assert res["annotations"]["n_points_shown"] == n_keep

    def test_waveform_papr_is_file_statistic(self, demo_outputs, tmp_path):
        out = tmp_path / "wf.png"
        res = render(PlotJob("waveform", str(demo_outputs["waveform"]), str(out)))
        assert out.exists() and out.stat().st_size > 0
        iq = np.frombuffer(open(demo_outputs["waveform"], "rb").read(),
                           dtype="<f4")
        p = np.abs(iq[0::2] + 1j * iq[1::2]) ** 2
        want = 10 * np.log10(p.max() / p.mean())
        assert res["annotations"]["papr_db"] == pytest.approx(want, abs=1e-9)

    def test_ambiguity_curve_with_overlay(self, demo_outputs, tmp_path):
        out = tmp_path / "amb.png"
        job = PlotJob("ambiguity", str(demo_outputs["ambiguity"]), str(out),
                      extra_inputs={"again": str(demo_outputs["ambiguity"])})
        res = render(job)
        assert out.exists() and out.stat().st_size > 0
        _, data = read_csv_rows(demo_outputs["ambiguity"])
        span = data[:, 0].max() - data[:, 0].min()
        off = np.abs(data[:, 0]) > 0.05 * span
        k = np.argmax(np.where(off, data[:, 1], -np.inf))
        assert res["annotations"]["sidelobe_hz"] == data[k, 0]
        assert res["annotations"]["sidelobe_mag"] == data[k, 1]


class TestEdgeCases:
    def test_empty_track_csv_renders_empty_axes(self, tmp_path):
        src = tmp_path / "empty.csv"
        src.write_text("time_s,track_id,az_deg,el_deg,delay_ns,power_db\n")
        out = tmp_path / "empty.png"
        code = main(["aoa_track", "--in", str(src), "--out", str(out)])
        assert code == 0
        assert out.exists() and out.stat().st_size > 0

    def test_malformed_header_exits_nonzero(self, tmp_path):
        src = tmp_path / "bad.csv"
        src.write_text("delay,power\n1,2\n")
        code = main(["pdp", "--in", str(src), "--out", str(tmp_path / "x.png")])
        assert code == 2

    def test_non_numeric_field_exits_nonzero(self, tmp_path):
        src = tmp_path / "bad2.csv"
        src.write_text("delay_ns,power_db\n1.0,oops\n")
        code = main(["pdp", "--in", str(src), "--out", str(tmp_path / "x.png")])
        assert code == 2

    def test_missing_file_exits_nonzero(self, tmp_path):
        code = main(["pdp", "--in", str(tmp_path / "none.csv"),
                     "--out", str(tmp_path / "x.png")])
        assert code == 2

    def test_waveform_sidecar_field_checked(self, tmp_path):
        bin_path = tmp_path / "w.bin"
        bin_path.write_bytes(np.zeros(8, dtype="<f4").tobytes())
        (tmp_path / "w.json").write_text(json.dumps({"n_samples": 4}))
        code = main(["waveform", "--in", str(bin_path),
                     "--out", str(tmp_path / "w.png")])
        assert code == 2

    def test_ragged_pas_grid_rejected(self, tmp_path):
        src = tmp_path / "pas.csv"
        src.write_text("az_deg,el_deg,power_db\n0,0,-1\n2,0,-2\n2,5,-3\n")
        code = main(["pas", "--in", str(src), "--out", str(tmp_path / "p.png")])
        assert code == 2

    def test_cli_reports_annotations_json(self, tmp_path, demo_outputs, capsys):
        out = tmp_path / "pdp2.png"
        code = main(["pdp", "--in", str(demo_outputs["pdp"]), "--out", str(out),
                     "--threshold-db", "40"])
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["kind"] == "pdp"
        assert "peak_delay_ns" in doc["annotations"]

    def test_console_script_installed(self, demo_outputs, tmp_path):
        out = tmp_path / "script.png"
        proc = subprocess.run(
            ["sounder-plot", "pdp", "--in", str(demo_outputs["pdp"]),
             "--out", str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert out.exists()
