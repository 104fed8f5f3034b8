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

from contextlib import contextmanager
import logging
import os
import os.path
import subprocess
import tempfile

from astropy.table import Table
import astropy.io.ascii

from doob_lab.__version__ import version

logger = logging.getLogger(__name__)


def configure_logger(level=logging.DEBUG):
    logging.basicConfig(
        datefmt='%Y-%m-%dT%H:%M:%S',
        format='%(levelname)-8s %(asctime)s %(name)s %(message)s',
        level=level)


def version_string():
    """
    Return a git-describe style version string when running from a
    checkout, or the package version otherwise.
    """

    here = os.path.dirname(os.path.abspath(__file__))

    try:
        output = subprocess.check_output(
            ['git', 'describe', '--tags', '--always', '--dirty'],
            cwd=here, stderr=subprocess.STDOUT)
        described = output.decode('ascii', 'replace').strip()
        if described:
            return '{0} ({1})'.format(version, described)

    except (OSError, subprocess.CalledProcessError):
        pass

    return version


@contextmanager
def atomic_path(pathname):
    """
    Context manager yielding a temporary path in the same directory as
    pathname.  When the block exits normally the temporary file is renamed
    over pathname, otherwise it is removed.
    """

    directory = os.path.dirname(os.path.abspath(pathname))
    if not os.path.isdir(directory):
        os.makedirs(directory)

    (fd, tmpname) = tempfile.mkstemp(
        prefix='.' + os.path.basename(pathname), dir=directory)
    os.close(fd)

    try:
        yield tmpname
        os.replace(tmpname, pathname)
        logger.info('wrote %s', pathname)

    finally:
        if os.path.exists(tmpname):
            os.remove(tmpname)


def write_csv(pathname, columns, names):
    """
    Write columns to a comma-separated file with a header row.

    Arguments:
    pathname : destination file
    columns  : list of 1-D sequences, all of the same length
    names    : column names for the header row
    """

    table = Table(list(columns), names=list(names))

    with atomic_path(pathname) as tmpname:
        table.write(tmpname, format='ascii.csv', overwrite=True)


def read_csv(pathname):
    """
    Read a comma-separated file written by write_csv as an astropy Table.
    """

    return Table.read(pathname, format='ascii.csv')


def write_summary(pathname, table):
    """
    Write a human-readable fixed-width table.
    """

    with atomic_path(pathname) as tmpname:
        with open(tmpname, 'w') as f:
            astropy.io.ascii.write(table, f, format='fixed_width')


def write_meta(pathname, config_text):
    """
    Write the configuration echo sidecar for an output file.

    The sidecar is named after the output with ".meta" appended and holds
    the resolved configuration and the version string.  It contains no
    timestamps so that reruns reproduce it exactly.
    """

    metaname = pathname + '.meta'

    with atomic_path(metaname) as tmpname:
        with open(tmpname, 'w', newline='\n') as f:
            f.write('# doob_lab {0}\n'.format(version_string()))
            f.write('# output {0}\n'.format(os.path.basename(pathname)))
            f.write(config_text)

    return metaname
