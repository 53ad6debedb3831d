import sys

from sparsefpca.cli import main

sys.exit(main())
