from django.test import SimpleTestCase

from .exceptions import ConfigurationError, OffPolicyBatchError, UndefinedRatioError
from .seeding import derive_seed


class DeriveSeedTests(SimpleTestCase):
    def test_same_parts_same_seed(self):
        self.assertEqual(derive_seed(7, 'prompts', 3), derive_seed(7, 'prompts', 3))

    def test_parts_are_ordered(self):
        self.assertNotEqual(derive_seed(1, 2), derive_seed(2, 1))
        self.assertNotEqual(derive_seed('1'), derive_seed(1))

    def test_seed_fits_in_63_bits(self):
        for parts in [(0,), (2**40, 'eval', 12), ('fd', -3)]:
            seed = derive_seed(*parts)
            self.assertGreaterEqual(seed, 0)
            self.assertLess(seed, 2**63)


class ExceptionTests(SimpleTestCase):
    def test_errors_are_value_errors(self):
        for error in (UndefinedRatioError, OffPolicyBatchError, ConfigurationError):
            self.assertTrue(issubclass(error, ValueError))
