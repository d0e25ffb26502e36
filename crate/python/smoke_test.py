"""Smoke test for the mpmri extension module.

Build and install first, e.g. `pip install --no-build-isolation ./crates/python`
(needs maturin), or copy target/release/libmpmri.so to mpmri.so on sys.path.
"""

import json
import sys
import tempfile
from pathlib import Path

import numpy as np

import mpmri


def main() -> int:
    p = mpmri.generate_patient(3, "SMOKE", in_plane=48, spacing=[1.0, 1.0, 3.6], slice_count_range=[8, 10], lesion_prevalence=1.0)
    t2, adc = p["t2"], p["adc"]
    assert t2.modality == "T2" and adc.modality == "ADC"
    assert t2.data.shape == tuple(t2.shape) and t2.data.dtype == np.float32
    assert np.allclose(np.diag(t2.affine)[:3], [1.0, 1.0, 3.6])
    assert p["lesion_zone"] in ("PZ", "CG")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        t2.save(tmp / "t2.nii.gz")
        assert mpmri.Volume.load(tmp / "t2.nii.gz") == t2

        corrected, field = mpmri.bias_correct(t2, n4_iterations=3)
        assert field.shape == tuple(t2.shape) and (field > 0).all()
        assert corrected.shape == t2.shape

        assert mpmri.roc_auc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]) == 0.75
        assert mpmri.trapezoid_auc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]) == 0.75
        mask = np.zeros((20, 20), dtype=np.float32)
        mask[8:11, 4:6] = 1.0
        assert mpmri.sequence_bbox([mask], 5) == (3, 15, 0, 10)

        patient = mpmri.prepare(t2, adc, pz=p["pz"], cg=p["cg"], n4_iterations=3)
        assert patient.regions == ["PZ", "CG"]
        pt2, padc, idx = patient.sequences("PZ", (16, 16))
        assert pt2.shape == padc.shape == (len(idx), 16, 16)

        pz = mpmri.Detector.untrained("PZ", 16, 16, seed=1)
        cg = mpmri.Detector.untrained("CG", 16, 16, seed=2)
        probs = pz.predict(pt2, padc)
        assert probs.shape == (len(idx),) and ((probs > 0) & (probs < 1)).all()
        cam, prob = pz.grad_cam(pt2[0], padc[0])
        assert cam.shape == (16, 16) and 0.0 <= cam.min() and cam.max() <= 1.0
        assert abs(prob - probs[0]) < 1e-6

        pz.save(tmp / "pz")
        assert np.array_equal(mpmri.Detector.load(tmp / "pz").predict(pt2, padc), probs)

        report = mpmri.triage(patient, pz, cg, top_k=2, out_dir=tmp / "report")
        assert [s["index"] for s in report["slices"]] == idx
        assert len(report["top"]) == 2
        assert json.loads((tmp / "report" / "report.json").read_text()) == report
        assert (tmp / "report" / "curve.png").exists()

        gland_only = mpmri.prepare(t2, adc, gland=p["gland"], n4_iterations=3)
        assert mpmri.triage(gland_only, pz, cg)["region_mode"] == "whole_gland"

        assert mpmri.run_cli(["--help"]) == 0
        assert mpmri.run_cli(["bogus"]) == 2

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
