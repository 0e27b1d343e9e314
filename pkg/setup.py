"""
Setup script for gridstab.
This file is needed for editable installs and some legacy tools.
"""

from setuptools import setup

setup()
