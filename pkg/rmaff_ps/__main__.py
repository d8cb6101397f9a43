"""python -m rmaff_ps"""

from .cli import main

if __name__ == "__main__":
    main()
