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


class DoobLabError(RuntimeError):
    """
    Base class for exceptions raised in the doob_lab package.
    """

    pass


class ConfigurationError(DoobLabError):
    """
    Class for errors raised by an invalid or inconsistent experiment
    configuration, e.g. a strategy that cannot be used with a model.
    """

    pass


class DomainError(DoobLabError, ValueError):
    """
    Class for errors raised when an argument lies outside the domain
    of an operation.
    """

    pass


class NumericalError(DoobLabError):
    """
    Class for errors raised by numerical degeneracy.
    """

    pass


class DivergenceError(NumericalError):
    """
    Class for errors raised when a training loss becomes non-finite.
    """

    pass
