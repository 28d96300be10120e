import re
import xml.etree.ElementTree as ET

import numpy as np

from fwdguide.svg import scatter_svg

NS = "{http://www.w3.org/2000/svg}"


def test_structure_and_counts():
    ref = np.random.default_rng(0).normal(size=(40, 2))
    smp = np.random.default_rng(1).normal(size=(17, 2)) * 3  # some fall outside the view
    root = ET.fromstring(scatter_svg(ref, smp, radius=0.3 ** 0.5, title="a<b"))
    assert root.get("viewBox") == "0 0 600 600"
    circles = root.iter(NS + "circle")
    classes = [c.get("class") for c in circles]
    assert classes.count("sample") == 17
    assert classes.count("reference") == 40
    assert classes.count("target") == 1


def test_coordinate_mapping_and_radius():
    svg = scatter_svg(np.zeros((0, 2)), np.array([[-1.5, 1.5], [1.5, -1.5], [0.0, 0.0]]), radius=1.5)
    xs = re.findall(r'class="sample" cx="([\d.]+)" cy="([\d.]+)"', svg)
    assert xs == [("0.00", "0.00"), ("600.00", "600.00"), ("300.00", "300.00")]
    assert 'class="target" cx="300.00" cy="300.00" r="300.00"' in svg


def test_no_circle_without_radius():
    assert 'class="target"' not in scatter_svg(np.zeros((1, 2)), np.zeros((1, 2)))
