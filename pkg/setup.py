# Copyright (C) 2026 The doob_lab developers.
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.

from setuptools import setup
import sys

sys.path.insert(0, 'lib')
from doob_lab.__version__ import version

setup(
    name='doob_lab',
    version=version,
    description='Conditional sampling with denoising diffusion models '
                'checked against exact Doob h-transform posteriors',
    license='GPLv3+',
    package_dir={'': 'lib'},
    packages=[
        'doob_lab',
    ],
    scripts=[
        'scripts/doob-lab',
    ],
    python_requires='>=3.8',
    install_requires=[
        'numpy>=1.22',
        'scipy>=1.7',
        'astropy>=4.0',
        'matplotlib>=3.3',
    ],
    test_suite='test',
)
