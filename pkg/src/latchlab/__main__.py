from latchlab.cli import main

main()
